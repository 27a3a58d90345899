use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

/// Unsigned-byte tensor with three dimensions (count, rows, cols).
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte tensor with one dimension (count).
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing {
            what: "IDX file",
            path: path.to_path_buf(),
            hint: "generate one with `saat synth` or pass --dataset-images/--dataset-labels",
        },
        _ => Error::Io(e),
    })
}

fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    if bytes.len() < 4 + 4 * dims {
        return Err(idx_err(path, "truncated header"));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(idx_err(
            path,
            format!("bad magic {:#010x}, expected {magic:#010x}", word(0)),
        ));
    }
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

/// Reads an IDX image/label pair, scaling pixels to `[0, 1]`.
pub fn ingest_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let ib = read(images)?;
    let lb = read(labels)?;
    let dims = header(&ib, images, IMAGE_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let payload = &ib[16..];
    if payload.len() < count * rows * cols {
        return Err(idx_err(
            images,
            format!(
                "truncated payload: {} bytes for {count} images of {rows}x{cols}",
                payload.len()
            ),
        ));
    }
    let ldims = header(&lb, labels, LABEL_MAGIC, 1)?;
    if ldims[0] != count {
        return Err(idx_err(labels, format!("{} labels for {count} images", ldims[0])));
    }
    let lpayload = &lb[8..];
    if lpayload.len() < count {
        return Err(idx_err(
            labels,
            format!("truncated payload: {} labels of {count}", lpayload.len()),
        ));
    }
    let pixels = payload[..count * rows * cols]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let label_vec: Vec<usize> = lpayload[..count].iter().map(|&b| b as usize).collect();
    Dataset::new(rows, cols, num_classes, pixels, label_vec)
}

/// Writes a dataset as an IDX pair; pixels are rounded to the nearest byte.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let n = dataset.len();
    let mut ib = Vec::with_capacity(16 + n * dataset.height() * dataset.width());
    ib.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [n, dataset.height(), dataset.width()] {
        ib.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for i in 0..n {
        ib.extend(
            dataset
                .pixels(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    let mut lb = Vec::with_capacity(8 + n);
    lb.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in dataset.labels() {
        let byte = u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} does not fit in a byte")))?;
        lb.push(byte);
    }
    for p in [images, labels] {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(images, ib)?;
    fs::write(labels, lb)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let (ip, lp) = (dir.join("img.idx"), dir.join("lbl.idx"));
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    fn image_file(count: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = IMAGE_MAGIC.to_be_bytes().to_vec();
        for d in [count, rows, cols] {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut v = LABEL_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_raw(dir.path(), &image_file(1, 2, 2, &[0, 255, 128, 64]), &label_file(&[3]));
        let ds = ingest_idx(&ip, &lp, 10).unwrap();
        assert_eq!(ds.pixels(0), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert_eq!(ds.label(0), 3);
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_raw(dir.path(), &image_file(1, 2, 2, &[0; 4]), &label_file(&[1, 2]));
        assert!(matches!(ingest_idx(&ip, &lp, 10), Err(Error::Idx { .. })));
    }

    #[test]
    fn bad_magic_truncation_and_label_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = image_file(1, 2, 2, &[0; 4]);
        bad[3] = 0x02;
        let (ip, lp) = write_raw(dir.path(), &bad, &label_file(&[1]));
        let err = ingest_idx(&ip, &lp, 10).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");

        let (ip, lp) = write_raw(dir.path(), &image_file(2, 2, 2, &[0; 5]), &label_file(&[1, 1]));
        let err = ingest_idx(&ip, &lp, 10).unwrap_err().to_string();
        assert!(err.contains("truncated payload"), "{err}");

        let (ip, lp) = write_raw(dir.path(), &image_file(1, 2, 2, &[0; 4]), &label_file(&[12]));
        assert!(matches!(
            ingest_idx(&ip, &lp, 10),
            Err(Error::LabelOutOfRange { label: 12, classes: 10 })
        ));
    }

    #[test]
    fn missing_file_is_actionable() {
        let err = ingest_idx(Path::new("/nonexistent/a"), Path::new("/nonexistent/b"), 10).unwrap_err();
        assert!(matches!(err, Error::Missing { .. }));
    }

    #[test]
    fn write_then_read_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let ds = Dataset::new(3, 4, 10, pixels, vec![0, 9]).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ds, &ip, &lp).unwrap();
        assert_eq!(ingest_idx(&ip, &lp, 10).unwrap(), ds);
        assert_eq!(ds.image(1).data(), ds.pixels(1));
    }
}
