//! Instruction samples, templating, and on-disk dataset emission.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};

use super::augment::{augment, jitter};
use super::render::{render_image, GrayImage, Layout};
use super::signal::{incompatible, synth_signal, ClassCatalog, EcgClass, EcgSignal, SignalSpec};

pub const QUESTIONS: [&str; 4] = [
    "What abnormalities are present in this ECG?",
    "Describe the findings in this ECG.",
    "Which abnormalities does this ECG show?",
    "Interpret this ECG.",
];

/// `Findings: st elevation, tall t.` with classes in catalog order.
pub fn answer_for(labels: &[EcgClass]) -> String {
    let mut sorted = labels.to_vec();
    sorted.sort();
    sorted.dedup();
    let names: Vec<&str> = sorted.iter().map(|c| c.canonical_name()).collect();
    format!("Findings: {}.", names.join(", "))
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    /// Image path relative to the manifest's directory.
    pub image: String,
    pub question: String,
    pub answer: String,
    pub labels: Vec<u8>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::Test => 0x7465_7374,
        }
    }
}

/// SplitMix64 finaliser; decorrelates neighbouring seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    mix(mix(seed ^ split.salt()) ^ index as u64)
}

/// Label set of sample `index`: the primary class cycles through the catalog;
/// a seeded draw at `multi_rate` adds a second compatible abnormality.
pub fn labels_for(index: usize, multi_rate: f64, sample_seed: u64) -> Vec<EcgClass> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed ^ 0x6c61_6265_6c73);
    let all = EcgClass::ALL;
    let primary = all[index % all.len()];
    if rng.random::<f64>() >= multi_rate {
        return vec![primary];
    }
    let abnormal: Vec<EcgClass> = all.iter().copied().filter(|&c| c != EcgClass::Normal).collect();
    let first = if primary == EcgClass::Normal {
        abnormal[rng.random_range(0..abnormal.len())]
    } else {
        primary
    };
    let partners: Vec<EcgClass> = abnormal
        .iter()
        .copied()
        .filter(|&c| c != first && !incompatible(first, c))
        .collect();
    let mut set = vec![first, partners[rng.random_range(0..partners.len())]];
    set.sort();
    set
}

/// Everything produced for one sample.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub record: InstructionSample,
    pub signal: EcgSignal,
    pub image: GrayImage,
}

pub fn generate_sample(
    cfg: &DataConfig,
    image_size: usize,
    split: Split,
    index: usize,
    seed: u64,
) -> Result<GeneratedSample> {
    let s = sample_seed(seed, split, index);
    let labels = labels_for(index, cfg.multi_label_rate, s);
    let spec = SignalSpec {
        leads: cfg.leads,
        sample_rate: cfg.sample_rate,
        duration_s: cfg.duration_s,
    };
    let signal = synth_signal(&labels, &spec, s)?;
    let layout = Layout {
        rows: cfg.layout_rows,
        cols: cfg.layout_cols,
    };
    let clean = render_image(&signal, layout, image_size)?;
    let transforms = if cfg.randomize_augment {
        jitter(&cfg.augment, mix(s ^ 1))
    } else {
        cfg.augment.clone()
    };
    let image = augment(&clean, &transforms, mix(s ^ 2))?;
    let question = QUESTIONS[(mix(s ^ 3) % QUESTIONS.len() as u64) as usize].to_string();
    let catalog = ClassCatalog::default();
    let record = InstructionSample {
        image: format!("{}/{index:05}.pgm", split.name()),
        question,
        answer: answer_for(&labels),
        labels: catalog.to_vector(&labels),
        seed: s,
    };
    Ok(GeneratedSample { record, signal, image })
}

/// Paths and per-class counts of an emitted dataset.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
}

pub fn class_counts(samples: &[InstructionSample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        for (c, &b) in counts.iter_mut().zip(&s.labels) {
            *c += usize::from(b);
        }
    }
    counts
}

fn check_stratified(split: Split, counts: &[usize]) -> Result<()> {
    let catalog = ClassCatalog::default();
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Stratification(format!(
            "class {} absent from the {} split",
            catalog.classes[missing].id(),
            split.name()
        )));
    }
    Ok(())
}

/// Label sets of a split without rendering anything.
pub fn plan_split(cfg: &DataConfig, split: Split, n: usize, seed: u64) -> Vec<Vec<EcgClass>> {
    (0..n)
        .map(|i| labels_for(i, cfg.multi_label_rate, sample_seed(seed, split, i)))
        .collect()
}

/// Writes `train/`, `test/` images and `train.jsonl`, `test.jsonl`
/// manifests under `out`. Stratification is checked before anything is
/// written. Optionally writes each sample's signal as CSV next to its image.
pub fn build_dataset(
    out: &Path,
    cfg: &DataConfig,
    image_size: usize,
    seed: u64,
    export_signals: bool,
) -> Result<DatasetSummary> {
    cfg.validate()?;
    let catalog = ClassCatalog::default();
    let mut counts = Vec::new();
    for (split, n) in [(Split::Train, cfg.n_train), (Split::Test, cfg.n_test)] {
        let plan = plan_split(cfg, split, n, seed);
        let mut c = vec![0; catalog.len()];
        for set in &plan {
            for cls in set {
                c[cls.index()] += 1;
            }
        }
        check_stratified(split, &c)?;
        counts.push(c);
    }

    let mut manifests = Vec::new();
    for (split, n) in [(Split::Train, cfg.n_train), (Split::Test, cfg.n_test)] {
        let dir = out.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let samples: Vec<GeneratedSample> = (0..n)
            .into_par_iter()
            .map(|i| generate_sample(cfg, image_size, split, i, seed))
            .collect::<Result<_>>()?;
        samples.par_iter().try_for_each(|s| -> Result<()> {
            let path = out.join(&s.record.image);
            s.image.save(&path)?;
            if export_signals {
                let csv = path.with_extension("csv");
                fs::write(&csv, s.signal.to_csv()).map_err(|e| Error::io(&csv, e))?;
            }
            Ok(())
        })?;
        let manifest = out.join(format!("{}.jsonl", split.name()));
        let records: Vec<InstructionSample> = samples.into_iter().map(|s| s.record).collect();
        write_manifest(&manifest, &records)?;
        manifests.push(manifest);
    }
    let test_counts = counts.pop().expect("two splits");
    let train_counts = counts.pop().expect("two splits");
    let test_manifest = manifests.pop().expect("two splits");
    let train_manifest = manifests.pop().expect("two splits");
    Ok(DatasetSummary {
        train_manifest,
        test_manifest,
        train_counts,
        test_counts,
    })
}

pub fn write_manifest(path: &Path, records: &[InstructionSample]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("serializable"));
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<InstructionSample>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstructionSample =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// A manifest row with its image decoded.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub record: InstructionSample,
    pub image: GrayImage,
}

/// Reads a manifest and every image it references.
pub fn load_split(manifest: &Path) -> Result<Vec<LoadedSample>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|record| {
            let image = GrayImage::load(&base.join(&record.image))?;
            Ok(LoadedSample { record, image })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn answers_list_names_in_catalog_order() {
        assert_eq!(
            answer_for(&[EcgClass::TallT, EcgClass::StElevation]),
            "Findings: st elevation, tall t."
        );
        assert_eq!(answer_for(&[EcgClass::Normal]), "Findings: normal.");
    }

    #[test]
    fn desk_plan_counts() {
        let cfg = RunConfig::desk().data;
        for (split, n) in [(Split::Train, 512), (Split::Test, 128)] {
            let plan = plan_split(&cfg, split, n, 42);
            for cls in EcgClass::ALL {
                let k = plan.iter().filter(|s| s.contains(&cls)).count();
                assert!(k >= 10, "{} appears {k} times in {}", cls.id(), split.name());
            }
            for set in &plan {
                for (i, &a) in set.iter().enumerate() {
                    for &b in &set[i + 1..] {
                        assert!(!incompatible(a, b));
                    }
                }
            }
        }
    }

    #[test]
    fn multi_label_rate_is_respected() {
        let cfg = RunConfig::desk().data;
        let plan = plan_split(&cfg, Split::Train, 2000, 1);
        let multi = plan.iter().filter(|s| s.len() > 1).count() as f64 / 2000.0;
        assert!((multi - 0.2).abs() < 0.03, "{multi}");
    }

    #[test]
    fn single_sample_cannot_be_stratified() {
        let mut cfg = RunConfig::desk().data;
        cfg.n_train = 1;
        cfg.n_test = 1;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_dataset(dir.path(), &cfg, 128, 1, false),
            Err(Error::Stratification(_))
        ));
    }
}
