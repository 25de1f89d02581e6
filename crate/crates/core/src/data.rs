//! Datasets, the synthetic factorized fixture, splits and episodes.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_tensor, standard_normal, SeedStream};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"DGIBDS01";
const HEADER_LEN: usize = 32;
const FLAG_TRUTH_A: u32 = 1;
const FLAG_TRUTH_Z: u32 = 2;
const FLAG_ATTRIBUTES: u32 = 4;

/// Labelled feature rows with optional ground-truth factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, d_X]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// `[n, d_A]` generating label factor of each row.
    pub truth_a: Option<Tensor>,
    /// `[n, d_Z]` generating style factor of each row.
    pub truth_z: Option<Tensor>,
    /// `[C, d_A]` per-class attribute rows.
    pub attributes: Option<Tensor>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            class_names,
            truth_a: None,
            truth_z: None,
            attributes: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rank() != 2 {
            return Err(Error::shape(
                "dataset",
                format!("features {:?} are not a matrix", self.features.shape()),
            ));
        }
        let n = self.len();
        if self.labels.len() != n {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for {n} rows", self.labels.len()),
            ));
        }
        let c = self.classes();
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        for (name, t) in [("truth_a", &self.truth_a), ("truth_z", &self.truth_z)] {
            if let Some(t) = t {
                if t.rank() != 2 || t.outer() != n {
                    return Err(Error::shape("dataset", format!("{name} {:?} for {n} rows", t.shape())));
                }
            }
        }
        if let Some(at) = &self.attributes {
            if at.rank() != 2 || at.outer() != c {
                return Err(Error::shape(
                    "dataset",
                    format!("attributes {:?} for {c} classes", at.shape()),
                ));
            }
            if let Some(ta) = &self.truth_a {
                if ta.last_dim() != at.last_dim() {
                    return Err(Error::shape("dataset", "truth_a and attributes widths differ"));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.outer()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_x(&self) -> usize {
        self.features.last_dim()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Width of the label factor block, from `truth_a` or `attributes`.
    pub fn d_a(&self) -> usize {
        self.truth_a
            .as_ref()
            .or(self.attributes.as_ref())
            .map_or(0, Tensor::last_dim)
    }

    pub fn d_z(&self) -> usize {
        self.truth_z.as_ref().map_or(0, Tensor::last_dim)
    }

    /// Row indices of each class, in row order.
    pub fn rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Rows `idx` as a new dataset over the same classes.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let pick = |t: &Option<Tensor>| t.as_ref().map(|t| t.select_rows(idx)).transpose();
        Ok(Self {
            features: self.features.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            truth_a: pick(&self.truth_a)?,
            truth_z: pick(&self.truth_z)?,
            attributes: self.attributes.clone(),
        })
    }

    /// Per-class feature means, `[C, d_X]`.
    pub fn class_centroids(&self) -> Tensor {
        let (c, d) = (self.classes(), self.d_x());
        let mut sum = vec![0.0; c * d];
        let mut count = vec![0usize; c];
        for (i, &y) in self.labels.iter().enumerate() {
            count[y] += 1;
            for (s, v) in sum[y * d..(y + 1) * d].iter_mut().zip(self.features.row(i)) {
                *s += v;
            }
        }
        for y in 0..c {
            let k = count[y].max(1) as f64;
            sum[y * d..(y + 1) * d].iter_mut().for_each(|s| *s /= k);
        }
        Tensor::from_parts(vec![c, d], sum)
    }

    /// Mean over classes with at least two rows of the per-dimension
    /// within-class variance, averaged over dimensions.
    pub fn mean_class_variance(&self) -> f64 {
        let d = self.d_x();
        let mut total = 0.0;
        let mut used = 0usize;
        for rows in self.rows_by_class() {
            if rows.len() < 2 {
                continue;
            }
            let k = rows.len() as f64;
            let mut acc = 0.0;
            for j in 0..d {
                let mean = rows.iter().map(|&i| self.features.row(i)[j]).sum::<f64>() / k;
                acc += rows
                    .iter()
                    .map(|&i| (self.features.row(i)[j] - mean).powi(2))
                    .sum::<f64>()
                    / (k - 1.0);
            }
            total += acc / d as f64;
            used += 1;
        }
        if used == 0 {
            0.0
        } else {
            total / used as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub n_per_class: usize,
    pub d_x: usize,
    pub d_a: usize,
    pub d_z: usize,
    pub noise_sigma: f64,
    /// Number of `tanh` mixing layers after the linear map.
    pub depth: usize,
    /// Scale of the style factor relative to the label factor.
    pub z_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            n_per_class: 100,
            d_x: 32,
            d_a: 4,
            d_z: 8,
            noise_sigma: 0.1,
            depth: 1,
            z_scale: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.classes, self.n_per_class, self.d_x, self.d_a, self.d_z];
        if counts.contains(&0) {
            return Err(Error::config(format!("synthetic counts must be >= 1: {self:?}")));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        if !(self.z_scale >= 0.0) || !self.z_scale.is_finite() {
            return Err(Error::config("z_scale must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Fixed mixing of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthMixing {
    /// `[d_A, d_X]`.
    pub w_a: Tensor,
    /// `[d_Z, d_X]`.
    pub w_z: Tensor,
    /// `depth` square `[d_X, d_X]` matrices, each followed by `tanh`.
    pub layers: Vec<Tensor>,
}

impl SynthMixing {
    fn draw(cfg: &SynthConfig, rng: &mut impl Rng) -> Self {
        let s = (1.0 / (cfg.d_a + cfg.d_z) as f64).sqrt();
        let scaled = |t: Tensor| t.map(|v| v * s).expect("finite");
        let w_a = scaled(normal_tensor(rng, &[cfg.d_a, cfg.d_x]));
        let w_z = scaled(normal_tensor(rng, &[cfg.d_z, cfg.d_x]));
        let g = (1.0 / cfg.d_x as f64).sqrt();
        let layers = (0..cfg.depth)
            .map(|_| normal_tensor(rng, &[cfg.d_x, cfg.d_x]).map(|v| v * g).expect("finite"))
            .collect();
        Self { w_a, w_z, layers }
    }

    /// Noise-free features for one `(a, z)` pair.
    pub fn apply(&self, a: &[f64], z: &[f64]) -> Vec<f64> {
        let d_x = self.w_a.last_dim();
        let mut h = vec![0.0; d_x];
        for (k, &ak) in a.iter().enumerate() {
            for (hj, w) in h.iter_mut().zip(self.w_a.row(k)) {
                *hj += ak * w;
            }
        }
        for (k, &zk) in z.iter().enumerate() {
            for (hj, w) in h.iter_mut().zip(self.w_z.row(k)) {
                *hj += zk * w;
            }
        }
        for m in &self.layers {
            let mut next = vec![0.0; d_x];
            for (k, &hk) in h.iter().enumerate() {
                for (nj, w) in next.iter_mut().zip(m.row(k)) {
                    *nj += hk * w;
                }
            }
            h = next.into_iter().map(f64::tanh).collect();
        }
        h
    }
}

/// Samples `x = g(W_a a*_c + W_z z*) + eps` with one attribute vector per
/// class and a fresh style vector per row. Rows are grouped by class.
pub fn synth_make(cfg: &SynthConfig, seed: u64) -> Result<(Dataset, SynthMixing)> {
    cfg.validate()?;
    let stream = SeedStream::new(seed);
    let mixing = SynthMixing::draw(cfg, &mut stream.substream("mixing").rng());
    let attributes = normal_tensor(&mut stream.substream("attributes").rng(), &[cfg.classes, cfg.d_a]);
    let mut rng = stream.substream("rows").rng();
    let n = cfg.classes * cfg.n_per_class;
    let mut features = Vec::with_capacity(n * cfg.d_x);
    let mut truth_a = Vec::with_capacity(n * cfg.d_a);
    let mut truth_z = Vec::with_capacity(n * cfg.d_z);
    let mut labels = Vec::with_capacity(n);
    for c in 0..cfg.classes {
        let a = attributes.row(c);
        for _ in 0..cfg.n_per_class {
            let z: Vec<f64> = (0..cfg.d_z).map(|_| cfg.z_scale * standard_normal(&mut rng)).collect();
            let x = mixing.apply(a, &z);
            features.extend(x.into_iter().map(|v| v + cfg.noise_sigma * standard_normal(&mut rng)));
            truth_a.extend_from_slice(a);
            truth_z.extend(z);
            labels.push(c);
        }
    }
    let ds = Dataset {
        features: Tensor::matrix(n, cfg.d_x, features)?,
        labels,
        class_names: (0..cfg.classes).map(|c| c.to_string()).collect(),
        truth_a: Some(Tensor::matrix(n, cfg.d_a, truth_a)?),
        truth_z: Some(Tensor::matrix(n, cfg.d_z, truth_z)?),
        attributes: Some(attributes),
    };
    ds.validate()?;
    Ok((ds, mixing))
}

/// Partitions classes into base and novel sets. Base labels are re-indexed
/// in ascending original order; novel labels follow the order of `novel`.
/// Both keep their original class names and attribute rows.
pub fn split_base_novel(ds: &Dataset, novel: &[usize]) -> Result<(Dataset, Dataset)> {
    let c = ds.classes();
    if novel.is_empty() || novel.len() >= c {
        return Err(Error::config(format!(
            "need between 1 and {} novel classes, got {}",
            c.saturating_sub(1),
            novel.len()
        )));
    }
    let mut is_novel = vec![false; c];
    for &k in novel {
        if k >= c {
            return Err(Error::config(format!("novel class {k} out of range for {c} classes")));
        }
        if is_novel[k] {
            return Err(Error::config(format!("novel class {k} listed twice")));
        }
        is_novel[k] = true;
    }
    let base: Vec<usize> = (0..c).filter(|&k| !is_novel[k]).collect();
    Ok((restrict(ds, &base)?, restrict(ds, novel)?))
}

/// Rows of `classes`, relabelled `classes[i] -> i`.
fn restrict(ds: &Dataset, classes: &[usize]) -> Result<Dataset> {
    let mut remap = vec![usize::MAX; ds.classes()];
    for (i, &k) in classes.iter().enumerate() {
        remap[k] = i;
    }
    let rows: Vec<usize> = (0..ds.len()).filter(|&i| remap[ds.labels[i]] != usize::MAX).collect();
    let mut out = ds.subset(&rows)?;
    out.labels = out.labels.iter().map(|&y| remap[y]).collect();
    out.class_names = classes.iter().map(|&k| ds.class_names[k].clone()).collect();
    out.attributes = ds.attributes.as_ref().map(|a| a.select_rows(classes)).transpose()?;
    out.validate()?;
    Ok(out)
}

/// Holds out `per_class` rows of every class (chosen by `seed`).
pub fn holdout_split(ds: &Dataset, per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = SeedStream::new(seed).substream("holdout").rng();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, rows) in ds.rows_by_class().into_iter().enumerate() {
        if rows.len() <= per_class {
            return Err(Error::contract(format!(
                "class {} has {} rows, cannot hold out {per_class}",
                ds.class_names[c],
                rows.len()
            )));
        }
        let picked = sample(&mut rng, rows.len(), per_class);
        let mut held = vec![false; rows.len()];
        for i in picked.iter() {
            held[i] = true;
        }
        for (j, &r) in rows.iter().enumerate() {
            if held[j] {
                test.push(r);
            } else {
                train.push(r);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}

/// One N-way K-shot task. Rows index the source dataset; labels are
/// episode-local in `[0, way)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    /// `classes[i]` is the dataset class behind episode label `i`.
    pub classes: Vec<usize>,
    pub support_rows: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query_rows: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn support_x(&self, ds: &Dataset) -> Result<Tensor> {
        ds.features.select_rows(&self.support_rows)
    }

    pub fn query_x(&self, ds: &Dataset) -> Result<Tensor> {
        ds.features.select_rows(&self.query_rows)
    }
}

/// Draws episodes from a fixed dataset.
pub struct EpisodeSampler<'a> {
    ds: &'a Dataset,
    rows: Vec<Vec<usize>>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(ds: &'a Dataset) -> Self {
        Self {
            ds,
            rows: ds.rows_by_class(),
        }
    }

    pub fn sample(&self, way: usize, shot: usize, queries: usize, rng: &mut impl Rng) -> Result<Episode> {
        let c = self.ds.classes();
        if way == 0 || shot == 0 {
            return Err(Error::config("episodes need way >= 1 and shot >= 1"));
        }
        if way > c {
            return Err(Error::contract(format!("{way}-way episode from {c} classes")));
        }
        for (k, rows) in self.rows.iter().enumerate() {
            if rows.len() < shot + queries {
                return Err(Error::contract(format!(
                    "class {} has {} rows, episode needs {}",
                    self.ds.class_names[k],
                    rows.len(),
                    shot + queries
                )));
            }
        }
        let classes: Vec<usize> = sample(rng, c, way).into_vec();
        let mut ep = Episode {
            way,
            shot,
            queries,
            classes: classes.clone(),
            support_rows: Vec::with_capacity(way * shot),
            support_labels: Vec::with_capacity(way * shot),
            query_rows: Vec::with_capacity(way * queries),
            query_labels: Vec::with_capacity(way * queries),
        };
        for (label, &k) in classes.iter().enumerate() {
            let rows = &self.rows[k];
            let picked = sample(rng, rows.len(), shot + queries);
            for (j, i) in picked.iter().enumerate() {
                if j < shot {
                    ep.support_rows.push(rows[i]);
                    ep.support_labels.push(label);
                } else {
                    ep.query_rows.push(rows[i]);
                    ep.query_labels.push(label);
                }
            }
        }
        Ok(ep)
    }
}

/// One episode drawn with a generator seeded from `seed`.
pub fn sample_episode(ds: &Dataset, way: usize, shot: usize, queries: usize, seed: u64) -> Result<Episode> {
    let mut rng = SeedStream::new(seed).substream("episode").rng();
    EpisodeSampler::new(ds).sample(way, shot, queries, &mut rng)
}

fn put_u32(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract(format!("{what} = {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes to the DGIBDS01 layout (see `docs/formats.md`).
pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut flags = 0;
    if ds.truth_a.is_some() {
        flags |= FLAG_TRUTH_A;
    }
    if ds.truth_z.is_some() {
        flags |= FLAG_TRUTH_Z;
    }
    if ds.attributes.is_some() {
        flags |= FLAG_ATTRIBUTES;
    }
    let n = ds.len();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * n * (ds.d_x() + 1 + ds.d_a() + ds.d_z()));
    buf.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut buf, n, "n")?;
    put_u32(&mut buf, ds.d_x(), "d_X")?;
    put_u32(&mut buf, ds.classes(), "C")?;
    put_u32(&mut buf, flags as usize, "flags")?;
    put_u32(&mut buf, ds.d_a(), "d_A")?;
    put_u32(&mut buf, ds.d_z(), "d_Z")?;
    put_f32s(&mut buf, &ds.features);
    for &y in &ds.labels {
        put_u32(&mut buf, y, "label")?;
    }
    for t in [&ds.truth_a, &ds.truth_z, &ds.attributes].into_iter().flatten() {
        put_f32s(&mut buf, t);
    }
    Ok(buf)
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.bytes.len(),
                detail: format!("truncated {what}: need {len} bytes at offset {}", self.pos),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32_matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Tensor> {
        let start = self.pos;
        let len = rows
            .checked_mul(cols)
            .and_then(|k| k.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: start,
                detail: format!("{what} size overflows"),
            })?;
        let b = self.take(len, what)?;
        let mut data = Vec::with_capacity(rows * cols);
        for (i, c) in b.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: start + 4 * i,
                    detail: format!("non-finite value in {what}"),
                });
            }
            data.push(v as f64);
        }
        Ok(Tensor::from_parts(vec![rows, cols], data))
    }
}

/// Parses the DGIBDS01 layout; nothing is returned unless the whole file
/// is consistent.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let n = cur.u32("n")?;
    let d_x = cur.u32("d_X")?;
    let c = cur.u32("C")?;
    let flags = cur.u32("flags")? as u32;
    let d_a = cur.u32("d_A")?;
    let d_z = cur.u32("d_Z")?;
    if flags & !(FLAG_TRUTH_A | FLAG_TRUTH_Z | FLAG_ATTRIBUTES) != 0 {
        return Err(Error::Format {
            offset: 20,
            detail: format!("unknown flag bits {flags:#x}"),
        });
    }
    let features = cur.f32_matrix(n, d_x, "features")?;
    let label_start = cur.pos;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = cur.u32("labels")?;
        if y >= c {
            return Err(Error::Format {
                offset: label_start + 4 * i,
                detail: format!("label {y} out of range for {c} classes"),
            });
        }
        labels.push(y);
    }
    let truth_a = (flags & FLAG_TRUTH_A != 0)
        .then(|| cur.f32_matrix(n, d_a, "truth_a"))
        .transpose()?;
    let truth_z = (flags & FLAG_TRUTH_Z != 0)
        .then(|| cur.f32_matrix(n, d_z, "truth_z"))
        .transpose()?;
    let attributes = (flags & FLAG_ATTRIBUTES != 0)
        .then(|| cur.f32_matrix(c, d_a, "attributes"))
        .transpose()?;
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            detail: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    let ds = Dataset {
        features,
        labels,
        class_names: (0..c).map(|k| k.to_string()).collect(),
        truth_a,
        truth_z,
        attributes,
    };
    ds.validate().map_err(|e| Error::Format {
        offset: HEADER_LEN,
        detail: e.to_string(),
    })?;
    Ok(ds)
}

pub fn dataset_write(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(ds)?)?;
    Ok(())
}

pub fn dataset_read(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Parse {
            line,
            detail: format!("expected {expected_len} fields, found {len}"),
        },
        other => Error::Parse {
            line,
            detail: format!("{other:?}"),
        },
    }
}

/// Rows of a headed CSV: the label cell and the numeric cells, with the
/// 1-based line number of each row.
fn read_labelled_csv(path: &Path, label_column: &str) -> Result<(Vec<String>, Vec<(usize, String, Vec<f64>)>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Parse {
            line: 1,
            detail: format!("no column named {label_column:?} in {}", path.display()),
        })?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let mut values = Vec::with_capacity(names.len());
        for (i, cell) in rec.iter().enumerate() {
            if i == label_idx {
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                detail: format!("non-numeric cell {cell:?} in column {:?}", headers.get(i).unwrap_or("")),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    detail: format!("non-finite cell {cell:?}"),
                });
            }
            values.push(v);
        }
        rows.push((line, rec[label_idx].trim().to_string(), values));
    }
    Ok((names, rows))
}

/// Imports features from a headed CSV with one label column. Labels are
/// re-indexed by first appearance; `class_names[i]` is the original label
/// of class `i`. The optional attributes CSV uses the same label column and
/// must hold exactly one row per class.
pub fn csv_import(features_csv: &Path, label_column: &str, attributes_csv: Option<&Path>) -> Result<Dataset> {
    let (cols, rows) = read_labelled_csv(features_csv, label_column)?;
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            detail: "no data rows".into(),
        });
    }
    let d = cols.len();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut class_names = Vec::new();
    let mut labels = Vec::with_capacity(rows.len());
    let mut data = Vec::with_capacity(rows.len() * d);
    for (_, label, values) in &rows {
        let next = class_names.len();
        let y = *index.entry(label.clone()).or_insert_with(|| {
            class_names.push(label.clone());
            next
        });
        labels.push(y);
        data.extend_from_slice(values);
    }
    let mut ds = Dataset::new(Tensor::matrix(rows.len(), d, data)?, labels, class_names)?;
    if let Some(path) = attributes_csv {
        let (acols, arows) = read_labelled_csv(path, label_column)?;
        if arows.len() != ds.classes() {
            return Err(Error::contract(format!(
                "attributes file has {} rows for {} classes",
                arows.len(),
                ds.classes()
            )));
        }
        let width = acols.len();
        let mut table = vec![f64::NAN; ds.classes() * width];
        let mut seen = vec![false; ds.classes()];
        for (line, label, values) in arows {
            let y = *index
                .get(&label)
                .ok_or_else(|| Error::contract(format!("attributes line {line}: unknown class {label:?}")))?;
            if seen[y] {
                return Err(Error::contract(format!(
                    "attributes line {line}: class {label:?} repeated"
                )));
            }
            seen[y] = true;
            table[y * width..(y + 1) * width].copy_from_slice(&values);
        }
        ds.attributes = Some(Tensor::matrix(ds.classes(), width, table)?);
    }
    Ok(ds)
}
