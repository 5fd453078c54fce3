//! Big-endian IDX image and label files (magics 0x803 and 0x801).

use super::{Label, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::LengthMismatch {
            path: path.into(),
            detail: format!("truncated header at byte {offset}"),
        })
}

/// Raw images: count x rows x cols bytes.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            got: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let count = read_u32_be(&bytes, 4, path)? as usize;
    let rows = read_u32_be(&bytes, 8, path)? as usize;
    let cols = read_u32_be(&bytes, 12, path)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            path: path.into(),
            detail: format!("expected {} bytes, file has {}", expected, bytes.len()),
        });
    }
    Ok((count, rows, cols, bytes[16..].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            got: magic,
            expected: LABELS_MAGIC,
        });
    }
    let count = read_u32_be(&bytes, 4, path)? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::LengthMismatch {
            path: path.into(),
            detail: format!("expected {} bytes, file has {}", 8 + count, bytes.len()),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// One-class loading: images of `normal_digit` are normal, everything else
/// anomalous. Bytes map linearly onto [-1, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path, normal_digit: u8) -> Result<Vec<Sample>> {
    let (count, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != count {
        return Err(Error::Data(format!(
            "{} images but {} labels ({} / {})",
            count,
            labels.len(),
            images_path.display(),
            labels_path.display()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let raw = &pixels[i * rows * cols..(i + 1) * rows * cols];
        let data: Vec<f32> = raw.iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
        samples.push(Sample {
            image: Tensor::new(vec![rows, cols, 1], data)?,
            label: if labels[i] == normal_digit {
                Label::Normal
            } else {
                Label::Anomalous
            },
            // whole-image anomalies: every pixel of a non-normal digit
            mask: if labels[i] == normal_digit {
                None
            } else {
                Some(crate::metrics::BinaryMask::new(
                    rows,
                    cols,
                    vec![true; rows * cols],
                )?)
            },
        });
    }
    Ok(samples)
}

pub fn write_idx_images(path: &Path, images: &[Vec<u8>], rows: usize, cols: usize) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut header = Vec::with_capacity(16);
    header.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    header.extend_from_slice(&(images.len() as u32).to_be_bytes());
    header.extend_from_slice(&(rows as u32).to_be_bytes());
    header.extend_from_slice(&(cols as u32).to_be_bytes());
    f.write_all(&header).map_err(|e| Error::io(path, e))?;
    for img in images {
        if img.len() != rows * cols {
            return Err(Error::Data(format!(
                "image has {} bytes, expected {}",
                img.len(),
                rows * cols
            )));
        }
        f.write_all(img).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("vtadl_idx_{tag}"));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn fixture_roundtrip() {
        let dir = temp_dir("roundtrip");
        let images = vec![vec![0u8; 28 * 28], vec![255u8; 28 * 28]];
        let labels = vec![1u8, 7u8];
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        write_idx_images(&ip, &images, 28, 28).unwrap();
        write_idx_labels(&lp, &labels).unwrap();
        let samples = load_idx(&ip, &lp, 1).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].image.shape(), &[28, 28, 1]);
        assert_eq!(samples[0].label, Label::Normal);
        assert_eq!(samples[1].label, Label::Anomalous);
        // byte endpoints map onto the range ends
        assert_eq!(samples[0].image.data()[0], -1.0);
        assert_eq!(samples[1].image.data()[0], 1.0);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_names_the_file() {
        let dir = temp_dir("badmagic");
        let path = dir.join("bogus.idx");
        let mut bytes = vec![0u8; 16];
        bytes[3] = 0; // magic 0x00000000
        std::fs::write(&path, &bytes).unwrap();
        let err = read_idx_images(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus.idx"), "{msg}");
        assert!(msg.contains("0x00000000"), "{msg}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = temp_dir("trunc");
        let path = dir.join("short.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend_from_slice(&[0u8; 100]); // far fewer than 2*784
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_idx_images(&path),
            Err(Error::LengthMismatch { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = temp_dir("mismatch");
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        write_idx_images(&ip, &[vec![0u8; 4]], 2, 2).unwrap();
        write_idx_labels(&lp, &[1, 2]).unwrap();
        assert!(load_idx(&ip, &lp, 1).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
