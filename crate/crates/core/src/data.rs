//! Synthetic labeled posts, dataset files and dataset statistics.
//!
//! Every post draws an overall label uniformly. The text always carries the
//! overall label; with probability `sd_rate` the image carries a different
//! one. Image patches scatter around a per-category mean, text tokens come
//! mostly from the text label's vocabulary partition, and OCR text (present
//! with probability `ocr_rate`) comes from the overall label's partition.
//!
//! Records are generated independently from `derive_seed(seed, id)`, so the
//! output does not depend on generation order.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::OCR_TOKEN;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schema::CategorySchema;
use crate::tensor::Tensor;

/// First token id available to content; 0 is padding and 1 the OCR marker.
pub const FIRST_CONTENT_TOKEN: usize = OCR_TOKEN + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostRecord {
    pub id: u64,
    /// `I` patch vectors of length `P`.
    pub image_patches: Vec<Vec<f64>>,
    pub text_tokens: Vec<usize>,
    /// `None` when the image contains no OCR text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_tokens: Option<Vec<usize>>,
    pub label: usize,
    pub image_label: usize,
    pub text_label: usize,
}

impl PostRecord {
    pub fn has_ocr(&self) -> bool {
        self.ocr_tokens.is_some()
    }

    pub fn is_discrepant(&self) -> bool {
        self.image_label != self.text_label
    }

    pub fn patches(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.image_patches)
    }

    /// Checks labels against `num_classes` and patch vectors for shape and
    /// finiteness.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let err = |message: String| Error::Record {
            id: self.id,
            message,
        };
        for (name, l) in [
            ("label", self.label),
            ("image_label", self.image_label),
            ("text_label", self.text_label),
        ] {
            if l >= num_classes {
                return Err(err(format!("{name} {l} outside {num_classes} classes")));
            }
        }
        let width = self.image_patches.first().map_or(0, Vec::len);
        if self.image_patches.iter().any(|p| p.len() != width) {
            return Err(err("patch vectors of unequal length".into()));
        }
        if self.image_patches.iter().flatten().any(|v| !v.is_finite()) {
            return Err(err("non-finite patch value".into()));
        }
        Ok(())
    }

    /// One JSON line; floats carry 17 significant digits.
    pub fn to_json_line(&self) -> String {
        let mut s = String::with_capacity(64 + self.image_patches.len() * 200);
        write!(s, "{{\"id\":{},\"image_patches\":[", self.id).unwrap();
        for (i, patch) in self.image_patches.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push('[');
            for (j, v) in patch.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                write!(s, "{v:.16e}").unwrap();
            }
            s.push(']');
        }
        s.push_str("],\"text_tokens\":");
        push_ids(&mut s, &self.text_tokens);
        if let Some(ocr) = &self.ocr_tokens {
            s.push_str(",\"ocr_tokens\":");
            push_ids(&mut s, ocr);
        }
        write!(
            s,
            ",\"label\":{},\"image_label\":{},\"text_label\":{}}}",
            self.label, self.image_label, self.text_label
        )
        .unwrap();
        s
    }
}

fn push_ids(s: &mut String, ids: &[usize]) {
    s.push('[');
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{id}").unwrap();
    }
    s.push(']');
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub schema: CategorySchema,
    pub n_posts: usize,
    /// Probability that the image label differs from the text label.
    pub sd_rate: f64,
    /// Probability that a post carries OCR text.
    pub ocr_rate: f64,
    pub noise_std: f64,
    /// Euclidean distance between any two category patch means.
    pub cluster_sep: f64,
    pub num_patches: usize,
    pub patch_dim: usize,
    pub vocab_size: usize,
    /// Inclusive range of text lengths.
    pub text_len: (usize, usize),
    /// Inclusive range of OCR lengths, before the marker.
    pub ocr_len: (usize, usize),
    /// Fraction of tokens drawn from the label's partition; the rest are
    /// uniform over all content tokens.
    pub token_purity: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    /// MVSA-Single-like rates over the default model dimensions.
    pub fn new(schema: CategorySchema, n_posts: usize, seed: u64) -> Self {
        Self {
            schema,
            n_posts,
            sd_rate: 0.425,
            ocr_rate: 0.609,
            noise_std: 0.5,
            cluster_sep: 3.0,
            num_patches: 16,
            patch_dim: 8,
            vocab_size: 256,
            text_len: (8, 16),
            ocr_len: (4, 15),
            token_purity: 0.9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.schema.validate()?;
        for (name, p) in [
            ("sd_rate", self.sd_rate),
            ("ocr_rate", self.ocr_rate),
            ("token_purity", self.token_purity),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.cluster_sep.is_nan() || self.cluster_sep <= 0.0 {
            return bad(format!(
                "cluster_sep must be positive, got {}",
                self.cluster_sep
            ));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return bad(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            ));
        }
        if self.schema.num_classes() > self.patch_dim {
            return bad(format!(
                "{} categories need patch_dim >= {}",
                self.schema.num_classes(),
                self.schema.num_classes()
            ));
        }
        if self.text_len.0 == 0 || self.text_len.0 > self.text_len.1 {
            return bad(format!("invalid text length range {:?}", self.text_len));
        }
        if self.ocr_len.0 > self.ocr_len.1 {
            return bad(format!("invalid OCR length range {:?}", self.ocr_len));
        }
        if self.num_patches == 0 {
            return bad("num_patches must be positive".into());
        }
        self.vocab_partitions().map(|_| ())
    }

    /// Contiguous, equally sized token ranges, one per category, covering the
    /// content tokens (a remainder is left unassigned).
    pub fn vocab_partitions(&self) -> Result<Vec<Range<usize>>> {
        let c = self.schema.num_classes();
        let content = self.vocab_size.saturating_sub(FIRST_CONTENT_TOKEN);
        let size = content / c;
        if size == 0 {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot be partitioned into {c} categories",
                self.vocab_size
            )));
        }
        Ok((0..c)
            .map(|k| FIRST_CONTENT_TOKEN + k * size..FIRST_CONTENT_TOKEN + (k + 1) * size)
            .collect())
    }

    /// Patch mean of category `k`: `cluster_sep/√2 · e_k`.
    pub fn category_mean(&self, k: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.patch_dim];
        mean[k] = self.cluster_sep / std::f64::consts::SQRT_2;
        mean
    }
}

/// Counts tallied by the generator while drawing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorTally {
    pub sd: usize,
    pub ocr: usize,
    pub ocr_and_sd: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: GeneratorSpec,
    pub tally: GeneratorTally,
    pub stats: DatasetStats,
}

fn draw_tokens(
    rng: &mut Rng,
    n: usize,
    partition: &Range<usize>,
    vocab: usize,
    purity: f64,
) -> Vec<usize> {
    (0..n)
        .map(|_| {
            if rng.bernoulli(purity) {
                partition.start + rng.below(partition.len())
            } else {
                FIRST_CONTENT_TOKEN + rng.below(vocab - FIRST_CONTENT_TOKEN)
            }
        })
        .collect()
}

fn draw_len(rng: &mut Rng, (lo, hi): (usize, usize)) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Generates one record from its own child stream.
pub fn generate_record(spec: &GeneratorSpec, partitions: &[Range<usize>], id: u64) -> PostRecord {
    let mut rng = Rng::child(spec.seed, id);
    let c = spec.schema.num_classes();
    let label = rng.below(c);
    let discrepant = rng.bernoulli(spec.sd_rate);
    let image_label = if discrepant {
        let k = rng.below(c - 1);
        if k >= label {
            k + 1
        } else {
            k
        }
    } else {
        label
    };
    let has_ocr = rng.bernoulli(spec.ocr_rate);

    let mean = spec.category_mean(image_label);
    let image_patches = (0..spec.num_patches)
        .map(|_| {
            mean.iter()
                .map(|m| rng.normal(*m, spec.noise_std))
                .collect()
        })
        .collect();

    let text_len = draw_len(&mut rng, spec.text_len);
    let text_tokens = draw_tokens(
        &mut rng,
        text_len,
        &partitions[label],
        spec.vocab_size,
        spec.token_purity,
    );
    let ocr_tokens = has_ocr.then(|| {
        let n = draw_len(&mut rng, spec.ocr_len);
        draw_tokens(
            &mut rng,
            n,
            &partitions[label],
            spec.vocab_size,
            spec.token_purity,
        )
    });

    PostRecord {
        id,
        image_patches,
        text_tokens,
        ocr_tokens,
        label,
        image_label,
        text_label: label,
    }
}

pub fn generate_dataset(spec: &GeneratorSpec) -> Result<(Vec<PostRecord>, Manifest)> {
    spec.validate()?;
    let partitions = spec.vocab_partitions()?;
    let records: Vec<PostRecord> = (0..spec.n_posts as u64)
        .map(|id| generate_record(spec, &partitions, id))
        .collect();
    let mut tally = GeneratorTally::default();
    for r in &records {
        tally.sd += usize::from(r.is_discrepant());
        tally.ocr += usize::from(r.has_ocr());
        tally.ocr_and_sd += usize::from(r.is_discrepant() && r.has_ocr());
    }
    let stats = dataset_stats(&records, spec.schema.num_classes())?;
    Ok((
        records,
        Manifest {
            spec: spec.clone(),
            tally,
            stats,
        },
    ))
}

pub fn write_dataset(records: &[PostRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        out.write_all(r.to_json_line().as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads line-delimited JSON records; blank lines are skipped and errors name
/// the 1-based line.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<PostRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: PostRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let width = record.image_patches.first().map_or(0, Vec::len);
        if record.image_patches.iter().any(|p| p.len() != width) {
            return Err(parse_err("patch vectors of unequal length".into()));
        }
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n: usize,
    pub class_counts: Vec<usize>,
    pub ocr: usize,
    pub ocr_pct: f64,
    pub sd: usize,
    pub sd_pct: f64,
    pub ocr_and_sd: usize,
    pub ocr_and_sd_pct: f64,
}

fn pct(count: usize, n: usize) -> f64 {
    (1000.0 * count as f64 / n as f64).round() / 10.0
}

pub fn dataset_stats(records: &[PostRecord], num_classes: usize) -> Result<DatasetStats> {
    if records.is_empty() {
        return Err(Error::Empty {
            op: "dataset_stats",
        });
    }
    let mut class_counts = vec![0; num_classes];
    let (mut ocr, mut sd, mut both) = (0, 0, 0);
    for r in records {
        r.validate(num_classes)?;
        class_counts[r.label] += 1;
        ocr += usize::from(r.has_ocr());
        sd += usize::from(r.is_discrepant());
        both += usize::from(r.has_ocr() && r.is_discrepant());
    }
    let n = records.len();
    Ok(DatasetStats {
        n,
        class_counts,
        ocr,
        ocr_pct: pct(ocr, n),
        sd,
        sd_pct: pct(sd, n),
        ocr_and_sd: both,
        ocr_and_sd_pct: pct(both, n),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<PostRecord>,
    pub val: Vec<PostRecord>,
    pub test: Vec<PostRecord>,
}

/// Seeded shuffle, then the first `n_train` records train, the next `n_val`
/// validate and the rest test.
pub fn split_counts(
    records: &[PostRecord],
    seed: u64,
    n_train: usize,
    n_val: usize,
) -> Result<Splits> {
    if n_train + n_val > records.len() {
        return Err(Error::Config(format!(
            "{n_train} train + {n_val} val exceeds {} records",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    Rng::child(seed, SPLIT_STREAM).shuffle(&mut order);
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok(Splits {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

/// 80/10/10 split (train and validation sizes rounded down).
pub fn split_default(records: &[PostRecord], seed: u64) -> Result<Splits> {
    let n = records.len();
    split_counts(records, seed, n * 8 / 10, n / 10)
}

const SPLIT_STREAM: u64 = 0x5350_4c49_5400_0000;

pub const MANIFEST_NAME: &str = "dataset.manifest.json";

pub fn split_paths(dir: &Path) -> [PathBuf; 3] {
    [
        dir.join("train.jsonl"),
        dir.join("val.jsonl"),
        dir.join("test.jsonl"),
    ]
}

/// Writes `train/val/test.jsonl` and the manifest into `dir`.
pub fn write_split_dir(dir: impl AsRef<Path>, splits: &Splits, manifest: &Manifest) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let [train, val, test] = split_paths(dir);
    write_dataset(&splits.train, train)?;
    write_dataset(&splits.val, val)?;
    write_dataset(&splits.test, test)?;
    let mut file = BufWriter::new(File::create(dir.join(MANIFEST_NAME))?);
    serde_json::to_writer_pretty(&mut file, manifest)?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}

pub fn read_split_dir(dir: impl AsRef<Path>) -> Result<Splits> {
    let [train, val, test] = split_paths(dir.as_ref());
    Ok(Splits {
        train: read_dataset(train)?,
        val: read_dataset(val)?,
        test: read_dataset(test)?,
    })
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.as_ref().join(MANIFEST_NAME))?;
    Ok(serde_json::from_str(&text)?)
}
