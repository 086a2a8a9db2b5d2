//! Dataset loading: a seeded synthetic mixture, IDX image/label pairs,
//! and CSV tables. All sources produce flat `[n, d]` batches with integer
//! class labels; any reshaping for convolutional models happens later.

use std::fs;

use packgrad::rng::StreamRng;
use packgrad::tensor::Tensor;

use crate::config::{data_err, CliError, DatasetSpec, TrainConfig};
use crate::domains;

#[derive(Debug)]
pub struct Dataset {
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub eval_x: Tensor,
    pub eval_y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn feature_len(&self) -> usize {
        self.train_x.sample_len()
    }

    pub fn train_len(&self) -> usize {
        self.train_x.samples()
    }
}

pub fn load(cfg: &TrainConfig) -> Result<Dataset, CliError> {
    match &cfg.dataset {
        DatasetSpec::Synthetic { samples, dims, classes } => {
            Ok(synthetic(*samples, *dims, *classes, cfg.seed, cfg.eval_fraction))
        }
        DatasetSpec::Idx { images, labels } => idx(images, labels, cfg.eval_fraction),
        DatasetSpec::Csv { path } => csv(path, cfg.eval_fraction),
    }
}

/// Gaussian mixture with one unit-normal center per class and half-unit
/// within-class noise. Labels cycle through the classes, so every class is
/// equally represented. The same seed always yields the same tensors; the
/// held-out samples are drawn after the training ones from the same stream.
pub fn synthetic(
    samples: usize,
    dims: usize,
    classes: usize,
    seed: u64,
    eval_fraction: f64,
) -> Dataset {
    let mut rng = StreamRng::new(seed, domains::DATA);
    let centers: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..dims).map(|_| rng.next_normal() as f32).collect())
        .collect();
    let mut draw = |n: usize| -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(n * dims);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            labels.push(c);
            for j in 0..dims {
                data.push(centers[c][j] + 0.5 * rng.next_normal() as f32);
            }
        }
        (Tensor::new(vec![n, dims], data).unwrap(), labels)
    };
    let eval_n = ((samples as f64 * eval_fraction).round() as usize).max(1);
    let (train_x, train_y) = draw(samples);
    let (eval_x, eval_y) = draw(eval_n);
    Dataset { train_x, train_y, eval_x, eval_y, classes }
}

fn be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32, CliError> {
    bytes
        .get(offset..offset + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| data_err(format!("{path}: offset {offset}: file ends inside a header field")))
}

fn idx(images: &str, labels: &str, eval_fraction: f64) -> Result<Dataset, CliError> {
    let img = fs::read(images).map_err(|e| data_err(format!("{images}: {e}")))?;
    let lab = fs::read(labels).map_err(|e| data_err(format!("{labels}: {e}")))?;

    let magic = be_u32(&img, 0, images)?;
    if magic != 0x0000_0803 {
        return Err(data_err(format!(
            "{images}: offset 0: magic {magic:#010x}, expected 0x00000803"
        )));
    }
    let n = be_u32(&img, 4, images)? as usize;
    let h = be_u32(&img, 8, images)? as usize;
    let w = be_u32(&img, 12, images)? as usize;
    let d = h * w;
    if n == 0 || d == 0 {
        return Err(data_err(format!("{images}: offset 4: empty image dimensions {n}x{h}x{w}")));
    }
    let expect = 16 + n * d;
    if img.len() != expect {
        return Err(data_err(format!(
            "{images}: offset {}: {} bytes total, header promises {expect}",
            img.len().min(expect),
            img.len()
        )));
    }

    let magic = be_u32(&lab, 0, labels)?;
    if magic != 0x0000_0801 {
        return Err(data_err(format!(
            "{labels}: offset 0: magic {magic:#010x}, expected 0x00000801"
        )));
    }
    let ln = be_u32(&lab, 4, labels)? as usize;
    if ln != n {
        return Err(data_err(format!(
            "{labels}: offset 4: {ln} labels for {n} images"
        )));
    }
    if lab.len() != 8 + n {
        return Err(data_err(format!(
            "{labels}: offset {}: {} bytes total, header promises {}",
            lab.len().min(8 + n),
            lab.len(),
            8 + n
        )));
    }

    let data: Vec<f32> = img[16..].iter().map(|&b| f32::from(b) / 255.0).collect();
    let ys: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let classes = ys.iter().max().unwrap() + 1;
    split_tail(Tensor::new(vec![n, d], data).unwrap(), ys, classes, eval_fraction)
}

fn csv(path: &str, eval_fraction: f64) -> Result<Dataset, CliError> {
    let text = fs::read_to_string(path).map_err(|e| data_err(format!("{path}: {e}")))?;
    let mut data = Vec::new();
    let mut ys = Vec::new();
    let mut width = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(data_err(format!(
                "{path}: line {lineno}: need at least one feature and a label"
            )));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(data_err(format!(
                    "{path}: line {lineno}: {} fields, previous rows had {w}",
                    fields.len()
                )))
            }
            _ => {}
        }
        let (label, feats) = fields.split_last().unwrap();
        for f in feats {
            data.push(f.parse::<f32>().map_err(|_| {
                data_err(format!("{path}: line {lineno}: {f:?} is not a number"))
            })?);
        }
        ys.push(label.parse::<usize>().map_err(|_| {
            data_err(format!("{path}: line {lineno}: label {label:?} is not a non-negative integer"))
        })?);
    }
    if ys.is_empty() {
        return Err(data_err(format!("{path}: no data rows")));
    }
    let d = width.unwrap() - 1;
    let n = ys.len();
    let classes = ys.iter().max().unwrap() + 1;
    split_tail(Tensor::new(vec![n, d], data).unwrap(), ys, classes, eval_fraction)
}

/// Holds the final rows out for evaluation, keeping at least one row on
/// each side.
fn split_tail(
    x: Tensor,
    y: Vec<usize>,
    classes: usize,
    eval_fraction: f64,
) -> Result<Dataset, CliError> {
    let n = x.samples();
    if n < 2 {
        return Err(data_err(format!("{n} samples: need at least 2 to hold out an eval split")));
    }
    let eval_n = ((n as f64 * eval_fraction).round() as usize).clamp(1, n - 1);
    let train_n = n - eval_n;
    let d = x.sample_len();
    let data = x.into_data();
    let (train_d, eval_d) = data.split_at(train_n * d);
    Ok(Dataset {
        train_x: Tensor::new(vec![train_n, d], train_d.to_vec()).unwrap(),
        train_y: y[..train_n].to_vec(),
        eval_x: Tensor::new(vec![eval_n, d], eval_d.to_vec()).unwrap(),
        eval_y: y[train_n..].to_vec(),
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_pair(dir: &std::path::Path, n: u32, h: u32, w: u32) -> (String, String) {
        let ipath = dir.join("images.idx").to_str().unwrap().to_string();
        let lpath = dir.join("labels.idx").to_str().unwrap().to_string();
        let d = (h * w) as usize;
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&n.to_be_bytes());
        img.extend_from_slice(&h.to_be_bytes());
        img.extend_from_slice(&w.to_be_bytes());
        for i in 0..n as usize * d {
            img.push((i % 251) as u8);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lab.extend_from_slice(&n.to_be_bytes());
        for i in 0..n as usize {
            lab.push((i % 3) as u8);
        }
        fs::File::create(&ipath).unwrap().write_all(&img).unwrap();
        fs::File::create(&lpath).unwrap().write_all(&lab).unwrap();
        (ipath, lpath)
    }

    #[test]
    fn synthetic_is_reproducible_and_balanced() {
        let a = synthetic(30, 5, 3, 7, 0.2);
        let b = synthetic(30, 5, 3, 7, 0.2);
        assert_eq!(a.train_x.data(), b.train_x.data());
        assert_eq!(a.eval_x.data(), b.eval_x.data());
        assert_eq!(a.train_y.iter().filter(|&&c| c == 0).count(), 10);
        assert_eq!(a.eval_x.samples(), 6);
        let c = synthetic(30, 5, 3, 8, 0.2);
        assert_ne!(a.train_x.data(), c.train_x.data());
    }

    #[test]
    fn synthetic_classes_are_separated() {
        let d = synthetic(60, 16, 2, 1, 0.2);
        // Within-class spread (0.5 per dim) is well under the distance
        // between two independent unit-normal centers in 16 dimensions.
        let dim = d.feature_len();
        let mut centroids = vec![vec![0.0f64; dim]; 2];
        let mut counts = [0usize; 2];
        for (i, &c) in d.train_y.iter().enumerate() {
            counts[c] += 1;
            for j in 0..dim {
                centroids[c][j] += f64::from(d.train_x.data()[i * dim + j]);
            }
        }
        let dist_sq: f64 = (0..dim)
            .map(|j| {
                let a = centroids[0][j] / counts[0] as f64;
                let b = centroids[1][j] / counts[1] as f64;
                (a - b) * (a - b)
            })
            .sum();
        assert!(dist_sq > 4.0, "centroids too close: {dist_sq}");
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ipath, lpath) = idx_pair(dir.path(), 10, 2, 3);
        let d = idx(&ipath, &lpath, 0.2).unwrap();
        assert_eq!(d.train_x.samples(), 8);
        assert_eq!(d.eval_x.samples(), 2);
        assert_eq!(d.feature_len(), 6);
        assert_eq!(d.classes, 3);
        assert!((f64::from(d.train_x.data()[1]) - 1.0 / 255.0).abs() < 1e-9);
    }

    #[test]
    fn truncated_idx_reports_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (ipath, lpath) = idx_pair(dir.path(), 10, 2, 3);
        let mut img = fs::read(&ipath).unwrap();
        img.truncate(30);
        fs::write(&ipath, &img).unwrap();
        let err = idx(&ipath, &lpath, 0.2).unwrap_err();
        assert!(err.msg.contains("offset 30"), "{}", err.msg);
    }

    #[test]
    fn wrong_idx_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ipath, lpath) = idx_pair(dir.path(), 4, 2, 2);
        let mut img = fs::read(&ipath).unwrap();
        img[3] = 0x07;
        fs::write(&ipath, &img).unwrap();
        let err = idx(&ipath, &lpath, 0.2).unwrap_err();
        assert!(err.msg.contains("magic"), "{}", err.msg);
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ipath, lpath) = idx_pair(dir.path(), 4, 2, 2);
        let mut lab = fs::read(&lpath).unwrap();
        lab[7] = 3;
        fs::write(&lpath, &lab).unwrap();
        let err = idx(&ipath, &lpath, 0.2).unwrap_err();
        assert!(err.msg.contains("3 labels for 4 images"), "{}", err.msg);
    }

    #[test]
    fn csv_parses_features_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "0.5, 1.5, 0\n-1.0, 2.0, 1\n0.0, 0.0, 1\n1.0, 1.0, 0\n").unwrap();
        let d = csv(path.to_str().unwrap(), 0.25).unwrap();
        assert_eq!(d.train_x.samples(), 3);
        assert_eq!(d.eval_y, vec![0]);
        assert_eq!(d.classes, 2);
        assert_eq!(d.train_x.data()[2], -1.0);
    }

    #[test]
    fn ragged_csv_rows_are_rejected_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "1, 2, 0\n1, 2, 3, 1\n").unwrap();
        let err = csv(path.to_str().unwrap(), 0.2).unwrap_err();
        assert!(err.msg.contains("line 2"), "{}", err.msg);
    }

    #[test]
    fn non_numeric_csv_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "1, x, 0\n1, 2, 1\n").unwrap();
        let err = csv(path.to_str().unwrap(), 0.2).unwrap_err();
        assert!(err.msg.contains("line 1"), "{}", err.msg);
    }
}
