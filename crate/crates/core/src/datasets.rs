//! Labelled datasets: synthetic identity clusters, IDX image files and
//! embedding/feature CSVs.
//!
//! Every loader relabels identities densely as `0..num_identities` in
//! ascending order of the source labels.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;

/// Parameters of a synthetic identity-cluster dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub per_identity: usize,
    pub input_dim: usize,
    /// Identity centres are uniform in `[-center_scale, center_scale]^input_dim`.
    pub center_scale: f64,
    /// Per-coordinate standard deviation of the isotropic noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 10,
            per_identity: 40,
            input_dim: 32,
            center_scale: 1.0,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf },
    Subset { parent: String, items: usize },
}

/// Contents of the JSON sidecar written next to datasets and embedding files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub name: String,
    pub source: DatasetSource,
    pub num_items: usize,
    pub num_identities: usize,
    pub input_dim: usize,
    /// `original_labels[i]` is the source label mapped to identity `i`.
    pub original_labels: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub items: Array2<f64>,
    pub labels: Vec<usize>,
    pub metadata: DatasetMetadata,
}

/// Maps arbitrary labels onto `0..n` in ascending order of the originals.
pub fn relabel_dense(labels: &[u64]) -> (Vec<usize>, Vec<u64>) {
    let mut mapping: BTreeMap<u64, usize> = labels.iter().map(|&l| (l, 0)).collect();
    for (i, slot) in mapping.values_mut().enumerate() {
        *slot = i;
    }
    let dense = labels.iter().map(|l| mapping[l]).collect();
    (dense, mapping.into_keys().collect())
}

impl LabeledDataset {
    pub fn new(items: Array2<f64>, raw_labels: &[u64], name: &str, source: DatasetSource) -> Result<Self> {
        if items.nrows() != raw_labels.len() {
            return Err(Error::Structure(format!(
                "{} items but {} labels",
                items.nrows(),
                raw_labels.len()
            )));
        }
        if items.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("dataset {name} has non-finite values")));
        }
        let (labels, original_labels) = relabel_dense(raw_labels);
        let metadata = DatasetMetadata {
            name: name.to_string(),
            source,
            num_items: items.nrows(),
            num_identities: original_labels.len(),
            input_dim: items.ncols(),
            original_labels,
        };
        Ok(Self {
            items,
            labels,
            metadata,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.items.ncols()
    }

    pub fn num_identities(&self) -> usize {
        self.metadata.num_identities
    }

    /// Rows `indices` in the given order, with identities relabelled densely.
    pub fn subset(&self, indices: &[usize], name: &str) -> Result<LabeledDataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("item {bad} is outside the dataset")));
        }
        let items = self.items.select(Axis(0), indices);
        let raw: Vec<u64> = indices.iter().map(|&i| self.labels[i] as u64).collect();
        let mut out = LabeledDataset::new(
            items,
            &raw,
            name,
            DatasetSource::Subset {
                parent: self.metadata.name.clone(),
                items: indices.len(),
            },
        )?;
        // keep labels traceable to the parent's source labels
        out.metadata.original_labels = out
            .metadata
            .original_labels
            .iter()
            .map(|&l| self.metadata.original_labels[l as usize])
            .collect();
        Ok(out)
    }

    /// Splits off `holdout_per_identity` randomly chosen items of every
    /// identity. Returns `(train, held_out)`; identities with too few items
    /// keep at least one training item.
    pub fn split_holdout(&self, holdout_per_identity: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut per: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            per.entry(l).or_default().push(i);
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for items in per.values() {
            let take = holdout_per_identity.min(items.len().saturating_sub(1));
            let picked = rand::seq::index::sample(&mut rng, items.len(), take).into_vec();
            for (pos, &item) in items.iter().enumerate() {
                if picked.contains(&pos) {
                    test.push(item);
                } else {
                    train.push(item);
                }
            }
        }
        if test.is_empty() {
            return Err(Error::Config("held-out split is empty".into()));
        }
        let name = &self.metadata.name;
        Ok((
            self.subset(&train, &format!("{name}/train"))?,
            self.subset(&test, &format!("{name}/heldout"))?,
        ))
    }

    pub fn write_metadata(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.metadata)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Gaussian identity clusters around uniformly drawn centres.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.num_identities == 0 || spec.per_identity == 0 || spec.input_dim == 0 {
        return Err(Error::Config("synthetic dataset counts must be at least 1".into()));
    }
    if !(spec.noise_sigma.is_finite() && spec.noise_sigma >= 0.0)
        || !(spec.center_scale.is_finite() && spec.center_scale >= 0.0)
    {
        return Err(Error::Config(
            "synthetic noise_sigma and center_scale must be finite and ≥ 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let n = spec.num_identities * spec.per_identity;
    let mut items = Array2::zeros((n, spec.input_dim));
    let mut labels = Vec::with_capacity(n);
    for id in 0..spec.num_identities {
        let center: Array1<f64> = (0..spec.input_dim)
            .map(|_| {
                if spec.center_scale > 0.0 {
                    rng.random_range(-spec.center_scale..=spec.center_scale)
                } else {
                    0.0
                }
            })
            .collect();
        for j in 0..spec.per_identity {
            let mut row = items.row_mut(id * spec.per_identity + j);
            for (v, c) in row.iter_mut().zip(center.iter()) {
                *v = c + noise.sample(&mut rng);
            }
            labels.push(id as u64);
        }
    }
    LabeledDataset::new(items, &labels, "synthetic", DatasetSource::Synthetic(*spec))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, source: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::format(
                source,
                format!("byte {offset}"),
                format!("file ends before the 4-byte header field at offset {offset}"),
            )
        })
}

/// Decodes an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8], images_name: &str, labels_name: &str) -> Result<(Array2<f64>, Vec<u64>)> {
    let magic = be_u32(images, 0, images_name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_name,
            "byte 0",
            format!("expected image magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let count = be_u32(images, 4, images_name)? as usize;
    let rows = be_u32(images, 8, images_name)? as usize;
    let cols = be_u32(images, 12, images_name)? as usize;
    let pixels = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(images_name, "byte 4", "declared image dimensions overflow"))?;
    let body = &images[16..];
    if body.len() != pixels {
        return Err(Error::format(
            images_name,
            format!("byte {}", 16 + body.len().min(pixels)),
            format!("header declares {pixels} pixel bytes but {} follow the header", body.len()),
        ));
    }

    let magic = be_u32(labels, 0, labels_name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_name,
            "byte 0",
            format!("expected label magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let label_count = be_u32(labels, 4, labels_name)? as usize;
    if label_count != count {
        return Err(Error::format(
            labels_name,
            "byte 4",
            format!("{label_count} labels declared for {count} images"),
        ));
    }
    let label_body = &labels[8..];
    if label_body.len() != label_count {
        return Err(Error::format(
            labels_name,
            format!("byte {}", 8 + label_body.len().min(label_count)),
            format!("header declares {label_count} labels but {} bytes follow", label_body.len()),
        ));
    }

    let items = Array2::from_shape_vec(
        (count, rows * cols),
        body.iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .expect("length checked");
    Ok((items, label_body.iter().map(|&b| b as u64).collect()))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (items, raw) = parse_idx(
        &images,
        &labels,
        &images_path.display().to_string(),
        &labels_path.display().to_string(),
    )?;
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
    LabeledDataset::new(
        items,
        &raw,
        &name,
        DatasetSource::Idx {
            images: images_path.to_path_buf(),
            labels: labels_path.to_path_buf(),
        },
    )
}

/// Writes `label,e0,…` rows with shortest round-trip float formatting.
pub fn write_embeddings<W: Write>(batch: &EmbeddingBatch, writer: W) -> Result<()> {
    write_rows(batch.vectors(), batch.labels().iter().map(|&l| l as u64), writer)
}

fn write_rows<W: Write>(rows: &Array2<f64>, labels: impl Iterator<Item = u64>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
    let mut header = vec!["label".to_string()];
    header.extend((0..rows.ncols()).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (row, label) in rows.rows().into_iter().zip(labels) {
        let mut record = vec![label.to_string()];
        record.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv flush failed: {e}")))
}

/// Reads a `label,e0,…` CSV. Labels are kept as written.
pub fn read_embeddings<R: Read>(reader: R, source: &str) -> Result<(Array2<f64>, Vec<u64>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = r
        .headers()
        .map_err(|e| Error::format(source, "line 1", e.to_string()))?
        .clone();
    if header.get(0) != Some("label") {
        return Err(Error::format(source, "line 1", "header must start with `label`"));
    }
    let dim = header.len() - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::format(source, format!("line {line}"), e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let at = || format!("line {line}");
        if record.len() != dim + 1 {
            return Err(Error::format(
                source,
                at(),
                format!("expected {} fields, found {}", dim + 1, record.len()),
            ));
        }
        let label: u64 = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::format(source, at(), format!("label {:?} is not a non-negative integer", &record[0])))?;
        labels.push(label);
        for cell in record.iter().skip(1) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::format(source, at(), format!("{cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(Error::format(source, at(), format!("{cell:?} is not finite")));
            }
            values.push(v);
        }
    }
    let rows = Array2::from_shape_vec((labels.len(), dim), values).expect("row lengths checked");
    Ok((rows, labels))
}

pub fn export_embeddings(batch: &EmbeddingBatch, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_embeddings(batch, std::io::BufWriter::new(file))
}

/// Like [`export_embeddings`] but with caller-supplied labels, typically
/// the dataset's original ones.
pub fn export_rows(rows: &Array2<f64>, labels: &[u64], path: &Path) -> Result<()> {
    if rows.nrows() != labels.len() {
        return Err(Error::Structure(format!(
            "{} rows but {} labels",
            rows.nrows(),
            labels.len()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(rows, labels.iter().copied(), std::io::BufWriter::new(file))
}

/// Reads an embedding CSV back. Labels must fit in `usize`.
pub fn import_embeddings(path: &Path) -> Result<EmbeddingBatch> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (rows, labels) = read_embeddings(std::io::BufReader::new(file), &path.display().to_string())?;
    EmbeddingBatch::new(rows, labels.into_iter().map(|l| l as usize).collect())
}

/// Loads a feature CSV (same layout as embedding CSVs) as a dataset.
pub fn load_features_csv(path: &Path) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (rows, labels) = read_embeddings(std::io::BufReader::new(file), &path.display().to_string())?;
    let name = path
        .file_name()
        .map_or_else(|| "csv".to_string(), |n| n.to_string_lossy().into_owned());
    LabeledDataset::new(rows, &labels, &name, DatasetSource::Csv { path: path.to_path_buf() })
}

/// Sidecar path for a data file: `x.csv` → `x.meta.json`.
pub fn metadata_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_noise_collapses_identities() {
        let spec = SyntheticSpec {
            num_identities: 3,
            per_identity: 4,
            input_dim: 5,
            noise_sigma: 0.0,
            ..SyntheticSpec::default()
        };
        let ds = gen_synthetic(&spec).unwrap();
        for id in 0..3 {
            let first = ds.items.row(id * 4);
            for j in 1..4 {
                assert_eq!(ds.items.row(id * 4 + j), first);
            }
        }
    }

    #[test]
    fn synthetic_structure_and_determinism() {
        let spec = SyntheticSpec {
            num_identities: 2,
            per_identity: 3,
            input_dim: 4,
            seed: 17,
            ..SyntheticSpec::default()
        };
        let a = gen_synthetic(&spec).unwrap();
        assert_eq!(a.items.dim(), (6, 4));
        assert_eq!(a.labels, vec![0, 0, 0, 1, 1, 1]);
        let b = gen_synthetic(&spec).unwrap();
        assert!(a.items.iter().zip(b.items.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn labels_are_relabelled_densely() {
        let (dense, originals) = relabel_dense(&[40, 7, 40, 1000, 7]);
        assert_eq!(dense, vec![1, 0, 1, 2, 0]);
        assert_eq!(originals, vec![7, 40, 1000]);
    }

    #[test]
    fn export_format_matches_expected_text() {
        let batch = EmbeddingBatch::new(array![[0.5, -1.0]], vec![7]).unwrap();
        let mut out = Vec::new();
        write_embeddings(&batch, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "label,e0,e1\n7,0.5,-1\n");
    }

    #[test]
    fn short_row_names_its_line() {
        let text = "label,e0,e1\n0,1.0,2.0\n1,3.0\n";
        let err = read_embeddings(text.as_bytes(), "mem").unwrap_err();
        match err {
            Error::Format { location, .. } => assert_eq!(location, "line 3"),
            other => panic!("unexpected {other:?}"),
        }
        let err = read_embeddings("label,e0\n0,abc\n".as_bytes(), "mem").unwrap_err();
        assert!(matches!(err, Error::Format { ref location, .. } if location == "line 2"));
    }

    #[test]
    fn holdout_split_partitions_each_identity() {
        let ds = gen_synthetic(&SyntheticSpec {
            num_identities: 4,
            per_identity: 10,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (train, test) = ds.split_holdout(3, 1).unwrap();
        assert_eq!((train.len(), test.len()), (28, 12));
        assert_eq!(test.num_identities(), 4);
        assert_eq!(train.metadata.original_labels, vec![0, 1, 2, 3]);
    }
}
