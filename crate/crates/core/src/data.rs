//! Extreme-classification text datasets: parsing, writing, batching and a
//! synthetic clustered generator.
//!
//! The format is a header line `num_points feature_dim label_dim` followed
//! by one line per point: `l1,l2,... idx:val idx:val ...`. A line starting
//! with whitespace has no labels.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::lsh::mix_seed;
use crate::sparse::{validate_record, Batch, DataRecord, SparseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub num_points: usize,
    pub feature_dim: usize,
    pub label_dim: usize,
}

/// A memory-resident dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DataRecord>,
    pub source: Option<PathBuf>,
}

fn parse_header(line: &str, line_no: usize) -> Result<DatasetHeader, DataError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(DataError::BadHeader {
            line: line_no,
            detail: format!("expected 3 fields, found {}", fields.len()),
        });
    }
    let mut v = [0usize; 3];
    for (slot, f) in v.iter_mut().zip(&fields) {
        *slot = f.parse().map_err(|_| DataError::BadHeader {
            line: line_no,
            detail: format!("{f:?} is not a non-negative integer"),
        })?;
    }
    if v[1] == 0 || v[2] == 0 {
        return Err(DataError::BadHeader {
            line: line_no,
            detail: "dimensions must be positive".into(),
        });
    }
    Ok(DatasetHeader {
        num_points: v[0],
        feature_dim: v[1],
        label_dim: v[2],
    })
}

/// Parses one record line (without line terminator).
pub fn parse_line(line: &str, line_no: usize, header: &DatasetHeader) -> Result<DataRecord, DataError> {
    let non_numeric = |field: &str| DataError::NonNumeric {
        line: line_no,
        field: field.to_string(),
    };
    let mut tokens = line.split_whitespace().peekable();
    let mut labels = Vec::new();
    let has_labels = !line.starts_with(char::is_whitespace)
        && tokens.peek().is_some_and(|t| !t.contains(':'));
    if has_labels {
        let field = tokens.next().expect("peeked");
        for l in field.split(',').filter(|s| !s.is_empty()) {
            let label: u64 = l.parse().map_err(|_| non_numeric(l))?;
            if label >= header.label_dim as u64 {
                return Err(DataError::LabelOutOfRange {
                    line: line_no,
                    label,
                    dim: header.label_dim,
                });
            }
            labels.push(label as u32);
        }
    }
    labels.sort_unstable();
    labels.dedup();
    let mut pairs: Vec<(u32, f32)> = Vec::new();
    for tok in tokens {
        let (i, v) = tok.split_once(':').ok_or_else(|| non_numeric(tok))?;
        let index: u64 = i.parse().map_err(|_| non_numeric(tok))?;
        let value: f32 = v.parse().map_err(|_| non_numeric(tok))?;
        if !value.is_finite() {
            return Err(non_numeric(tok));
        }
        if index >= header.feature_dim as u64 {
            return Err(DataError::FeatureOutOfRange {
                line: line_no,
                index,
                dim: header.feature_dim,
            });
        }
        pairs.push((index as u32, value));
    }
    pairs.sort_by_key(|p| p.0);
    if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(DataError::DuplicateIndex {
            line: line_no,
            index: w[0].0,
        });
    }
    let (indices, values) = pairs.into_iter().unzip();
    Ok(DataRecord {
        features: SparseVector::new_unchecked(indices, values, header.feature_dim),
        labels,
    })
}

pub fn parse_xc_reader(reader: impl BufRead) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(DataError::MissingHeader.into()),
            Some((i, line)) => {
                let line = line.map_err(|e| DataError::Io(e.to_string()))?;
                let line = line.trim_end_matches('\r');
                if line.trim().is_empty() {
                    continue;
                }
                break parse_header(line, i + 1)?;
            }
        }
    };
    let mut records = Vec::with_capacity(header.num_points.min(1 << 24));
    let mut pending_blank = 0usize;
    for (i, line) in lines {
        let line = line.map_err(|e| DataError::Io(e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            // a blank line is an empty point unless it only pads the end
            // of the file
            pending_blank += 1;
            continue;
        }
        for _ in 0..pending_blank {
            records.push(DataRecord {
                features: SparseVector::empty(header.feature_dim),
                labels: Vec::new(),
            });
        }
        pending_blank = 0;
        records.push(parse_line(line, i + 1, &header)?);
    }
    let missing = header.num_points.saturating_sub(records.len()).min(pending_blank);
    for _ in 0..missing {
        records.push(DataRecord {
            features: SparseVector::empty(header.feature_dim),
            labels: Vec::new(),
        });
    }
    if records.len() != header.num_points {
        return Err(DataError::CountMismatch {
            expected: header.num_points,
            found: records.len(),
        }
        .into());
    }
    Ok(Dataset {
        header,
        records,
        source: None,
    })
}

pub fn parse_xc(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path).map_err(|e| {
        Error::Data(DataError::Io(format!("cannot open {}: {e}", path.display())))
    })?;
    let mut ds = parse_xc_reader(BufReader::new(f))?;
    ds.source = Some(path.to_path_buf());
    Ok(ds)
}

pub fn write_xc_to(ds: &Dataset, mut w: impl Write) -> Result<()> {
    let h = &ds.header;
    writeln!(w, "{} {} {}", h.num_points, h.feature_dim, h.label_dim)?;
    for r in &ds.records {
        let labels: Vec<String> = r.labels.iter().map(u32::to_string).collect();
        if labels.is_empty() {
            write!(w, " ")?;
        } else {
            write!(w, "{}", labels.join(","))?;
        }
        for (i, v) in r.features.iter() {
            write!(w, " {i}:{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_xc(ds: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let f = fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    write_xc_to(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

impl Dataset {
    pub fn new(header: DatasetHeader, records: Vec<DataRecord>) -> Result<Self> {
        let ds = Dataset {
            header,
            records,
            source: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Full scan: record count and every record's invariants.
    pub fn validate(&self) -> Result<()> {
        if self.records.len() != self.header.num_points {
            return Err(DataError::CountMismatch {
                expected: self.header.num_points,
                found: self.records.len(),
            }
            .into());
        }
        for r in &self.records {
            validate_record(r, self.header.feature_dim, self.header.label_dim)?;
        }
        Ok(())
    }

    /// Record indices of each batch, in iteration order.
    pub fn batch_order(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
        batch_order(self.records.len(), batch_size, shuffle_seed)
    }

    pub fn batches(
        &self,
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> impl Iterator<Item = Batch<'_>> + '_ {
        self.batch_order(batch_size, shuffle_seed)
            .into_iter()
            .map(move |ids| Batch {
                records: ids.iter().map(|&i| &self.records[i]).collect(),
                capacity: batch_size,
            })
    }
}

/// `ceil(n / batch_size)` index groups over a seeded permutation, or file
/// order without a seed.
pub fn batch_order(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5bff)));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub features: usize,
    pub per_class: usize,
    #[serde(default = "synth_defaults::noise")]
    pub noise: f64,
    /// Coordinates in each class prototype.
    #[serde(default = "synth_defaults::support")]
    pub support: usize,
    /// Non-zeros kept per point after sparsification.
    #[serde(default = "synth_defaults::nnz")]
    pub nnz: usize,
    #[serde(default)]
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

mod synth_defaults {
    pub fn noise() -> f64 {
        0.1
    }
    pub fn support() -> usize {
        16
    }
    pub fn nnz() -> usize {
        24
    }
}

impl SynthConfig {
    pub fn new(classes: usize, features: usize, per_class: usize) -> Self {
        SynthConfig {
            classes,
            features,
            per_class,
            noise: synth_defaults::noise(),
            support: synth_defaults::support(),
            nnz: synth_defaults::nnz(),
            test_per_class: 0,
            seed: 0,
        }
    }
}

/// Clustered multi-class data. Each class has a prototype on `support`
/// random coordinates with a Gaussian magnitude profile, normalized to unit
/// length. A point adds `noise`-scaled Gaussian noise to the prototype
/// coordinates and to as many random extra coordinates, then keeps the
/// `nnz` largest magnitudes. Returns the train split and a held-out split
/// with `test_per_class` points per class.
pub fn synth_clustered(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    if cfg.classes == 0 || cfg.features == 0 || cfg.per_class == 0 {
        return Err(Error::config("synthetic dataset sizes must be positive"));
    }
    if cfg.classes > u32::MAX as usize || cfg.features > u32::MAX as usize {
        return Err(Error::config("synthetic dimensions exceed 32-bit ids"));
    }
    let support = cfg.support.clamp(1, cfg.features);
    let nnz = cfg.nnz.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5e7));
    let prototypes: Vec<Vec<(u32, f64)>> = (0..cfg.classes)
        .map(|_| {
            let coords: Vec<u32> = rand::seq::index::sample(&mut rng, cfg.features, support)
                .into_iter()
                .map(|c| c as u32)
                .collect();
            let mut p: Vec<(u32, f64)> = coords
                .into_iter()
                .enumerate()
                .map(|(rank, c)| {
                    let t = rank as f64 / support as f64;
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    (c, sign * (-2.0 * t * t).exp())
                })
                .collect();
            let norm = p.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
            p.iter_mut().for_each(|(_, v)| *v /= norm);
            p
        })
        .collect();

    let point = |class: usize, rng: &mut ChaCha8Rng| -> DataRecord {
        let mut coords: Vec<(u32, f64)> = prototypes[class]
            .iter()
            .map(|&(c, v)| {
                let z: f64 = StandardNormal.sample(rng);
                (c, v + cfg.noise * z)
            })
            .collect();
        for _ in 0..support {
            let c = rng.random_range(0..cfg.features as u32);
            let z: f64 = StandardNormal.sample(rng);
            match coords.iter_mut().find(|(k, _)| *k == c) {
                Some((_, v)) => *v += cfg.noise * z,
                None => coords.push((c, cfg.noise * z)),
            }
        }
        coords.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
        coords.truncate(nnz);
        coords.retain(|(_, v)| *v != 0.0);
        coords.sort_by_key(|p| p.0);
        DataRecord {
            features: SparseVector::new_unchecked(
                coords.iter().map(|p| p.0).collect(),
                coords.iter().map(|p| p.1 as f32).collect(),
                cfg.features,
            ),
            labels: vec![class as u32],
        }
    };

    let split = |per_class: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut records = Vec::with_capacity(cfg.classes * per_class);
        for _ in 0..per_class {
            for class in 0..cfg.classes {
                records.push(point(class, rng));
            }
        }
        Dataset::new(
            DatasetHeader {
                num_points: records.len(),
                feature_dim: cfg.features,
                label_dim: cfg.classes,
            },
            records,
        )
    };
    let train = split(cfg.per_class, &mut rng)?;
    let mut test_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7e57));
    let test = split(cfg.test_per_class, &mut test_rng)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Dataset> {
        parse_xc_reader(text.as_bytes())
    }

    #[test]
    fn amazon_shaped_header() {
        let h = parse_header("490449 135909 670091", 1).unwrap();
        assert_eq!(
            h,
            DatasetHeader {
                num_points: 490_449,
                feature_dim: 135_909,
                label_dim: 670_091
            }
        );
    }

    #[test]
    fn minimal_line() {
        let ds = parse("1 2 4\n3 0:1.0\n").unwrap();
        assert_eq!(ds.records[0].labels, vec![3]);
        assert_eq!(ds.records[0].features.indices, vec![0]);
        assert_eq!(ds.records[0].features.values, vec![1.0]);
    }

    #[test]
    fn label_out_of_range_reports_line() {
        let err = parse("2 2 4\n1 1:2\n5 0:1.0\n").unwrap_err();
        assert!(matches!(err, Error::Data(DataError::LabelOutOfRange { line: 3, label: 5, dim: 4 })));
    }

    #[test]
    fn distinct_errors_with_locations() {
        assert!(matches!(parse("").unwrap_err(), Error::Data(DataError::MissingHeader)));
        assert!(matches!(parse("1 2\n").unwrap_err(), Error::Data(DataError::BadHeader { line: 1, .. })));
        assert!(matches!(parse("1 2 3\n0 x:1\n").unwrap_err(), Error::Data(DataError::NonNumeric { line: 2, .. })));
        assert!(matches!(parse("1 2 3\n0 0:abc\n").unwrap_err(), Error::Data(DataError::NonNumeric { line: 2, .. })));
        assert!(matches!(
            parse("1 2 3\n0 2:1\n").unwrap_err(),
            Error::Data(DataError::FeatureOutOfRange { line: 2, index: 2, dim: 2 })
        ));
        assert!(matches!(
            parse("1 5 3\n0 3:1 1:1 3:2\n").unwrap_err(),
            Error::Data(DataError::DuplicateIndex { line: 2, index: 3 })
        ));
        assert!(matches!(
            parse("3 5 3\n0 3:1\n").unwrap_err(),
            Error::Data(DataError::CountMismatch { expected: 3, found: 1 })
        ));
    }

    #[test]
    fn crlf_unsorted_and_unlabelled_lines() {
        let ds = parse("3 10 5\r\n1,0 7:0.5 2:1.5\r\n 4:2\r\n4\r\n").unwrap();
        assert_eq!(ds.records[0].labels, vec![0, 1]);
        assert_eq!(ds.records[0].features.indices, vec![2, 7]);
        assert!(ds.records[1].labels.is_empty());
        assert_eq!(ds.records[1].features.indices, vec![4]);
        assert!(ds.records[2].features.indices.is_empty());
        ds.validate().unwrap();
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let sizes: Vec<usize> = batch_order(10, 4, None).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(batch_order(10, 4, None)[0], vec![0, 1, 2, 3]);
        assert_eq!(batch_order(500, 7, Some(3)), batch_order(500, 7, Some(3)));
        assert_ne!(batch_order(500, 7, Some(3)), batch_order(500, 7, Some(4)));
    }

    #[test]
    fn synth_header_and_validity() {
        let mut cfg = SynthConfig::new(50, 300, 3);
        cfg.test_per_class = 1;
        let (train, test) = synth_clustered(&cfg).unwrap();
        assert_eq!(train.header.num_points, 150);
        assert_eq!(test.header.num_points, 50);
        train.validate().unwrap();
        assert!(train.records.iter().all(|r| r.features.nnz() <= cfg.nnz));
        let again = synth_clustered(&cfg).unwrap().0;
        assert_eq!(train, again);
    }

    #[test]
    fn synth_large_header_arithmetic() {
        let cfg = SynthConfig::new(5000, 10_000, 20);
        let (train, _) = synth_clustered(&cfg).unwrap();
        assert_eq!(
            train.header,
            DatasetHeader {
                num_points: 100_000,
                feature_dim: 10_000,
                label_dim: 5000
            }
        );
        train.validate().unwrap();
    }

    #[test]
    fn zero_noise_points_are_nearest_their_prototype() {
        let mut cfg = SynthConfig::new(40, 200, 2);
        cfg.noise = 0.0;
        let (train, _) = synth_clustered(&cfg).unwrap();
        // with no noise, both copies of a class are identical and differ
        // from every other class
        let by_class: Vec<&DataRecord> = train.records[..40].iter().collect();
        for (c, r) in train.records[40..].iter().enumerate() {
            assert_eq!(r.features, by_class[c].features);
        }
        for a in 0..40 {
            for b in (a + 1)..40 {
                assert_ne!(by_class[a].features, by_class[b].features);
            }
        }
    }

    proptest! {
        #[test]
        fn write_then_parse_round_trips(seed in any::<u64>(), classes in 1usize..8, per in 1usize..4) {
            let mut cfg = SynthConfig::new(classes, 30, per);
            cfg.seed = seed;
            cfg.nnz = 6;
            let (mut ds, _) = synth_clustered(&cfg).unwrap();
            ds.records[0].labels.clear();
            let mut buf = Vec::new();
            write_xc_to(&ds, &mut buf).unwrap();
            let back = parse_xc_reader(buf.as_slice()).unwrap();
            prop_assert_eq!(back.header, ds.header);
            prop_assert_eq!(back.records, ds.records);
        }
    }
}
