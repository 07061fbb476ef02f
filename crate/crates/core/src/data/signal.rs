//! Parametric multi-lead ECG synthesis.
//!
//! Each beat is a sum of Gaussian bumps (P, Q, R, S, T) placed around the R
//! peak. Class effects modify the template or the rhythm.

use std::fmt::Write as _;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest magnitude a synthesized sample may take, in millivolts.
pub const MAX_MV: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EcgClass {
    Normal,
    StElevation,
    WideQrs,
    IrregularRr,
    LowVoltage,
    TallT,
}

impl EcgClass {
    /// Catalog order.
    pub const ALL: [EcgClass; 6] = [
        EcgClass::Normal,
        EcgClass::StElevation,
        EcgClass::WideQrs,
        EcgClass::IrregularRr,
        EcgClass::LowVoltage,
        EcgClass::TallT,
    ];

    pub fn index(self) -> usize {
        EcgClass::ALL.iter().position(|&c| c == self).expect("in catalog")
    }

    /// Identifier form, e.g. `ST_ELEVATION`.
    pub fn id(self) -> &'static str {
        match self {
            EcgClass::Normal => "NORMAL",
            EcgClass::StElevation => "ST_ELEVATION",
            EcgClass::WideQrs => "WIDE_QRS",
            EcgClass::IrregularRr => "IRREGULAR_RR",
            EcgClass::LowVoltage => "LOW_VOLTAGE",
            EcgClass::TallT => "TALL_T",
        }
    }

    /// Phrase used in reports, e.g. `st elevation`.
    pub fn canonical_name(self) -> &'static str {
        match self {
            EcgClass::Normal => "normal",
            EcgClass::StElevation => "st elevation",
            EcgClass::WideQrs => "wide qrs",
            EcgClass::IrregularRr => "irregular rr",
            EcgClass::LowVoltage => "low voltage",
            EcgClass::TallT => "tall t",
        }
    }

    pub fn from_id(id: &str) -> Option<EcgClass> {
        EcgClass::ALL.iter().copied().find(|c| c.id() == id)
    }
}

/// Pairs that cannot co-occur in one recording.
pub fn incompatible(a: EcgClass, b: EcgClass) -> bool {
    use EcgClass::*;
    if a == b {
        return false;
    }
    matches!(
        (a, b),
        (Normal, _) | (_, Normal) | (LowVoltage, TallT) | (TallT, LowVoltage)
    )
}

/// Ordered class names; every per-class vector in the crate follows this order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCatalog {
    pub classes: Vec<EcgClass>,
}

impl Default for ClassCatalog {
    fn default() -> Self {
        ClassCatalog {
            classes: EcgClass::ALL.to_vec(),
        }
    }
}

impl ClassCatalog {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.classes.iter().map(|c| c.canonical_name()).collect()
    }

    pub fn to_vector(&self, set: &[EcgClass]) -> Vec<u8> {
        self.classes.iter().map(|c| u8::from(set.contains(c))).collect()
    }

    pub fn from_vector(&self, bits: &[u8]) -> Vec<EcgClass> {
        self.classes
            .iter()
            .zip(bits)
            .filter(|(_, &b)| b != 0)
            .map(|(&c, _)| c)
            .collect()
    }
}

/// Recording geometry shared by every sample of a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalSpec {
    pub leads: usize,
    pub sample_rate: f64,
    pub duration_s: f64,
}

impl SignalSpec {
    pub fn samples_per_lead(&self) -> usize {
        (self.sample_rate * self.duration_s).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcgSignal {
    pub leads: usize,
    pub samples_per_lead: usize,
    /// Lead-major millivolts.
    pub values: Vec<f64>,
    pub sample_rate: f64,
    pub labels: Vec<EcgClass>,
}

impl EcgSignal {
    pub fn zeros(spec: &SignalSpec) -> Self {
        let n = spec.samples_per_lead();
        EcgSignal {
            leads: spec.leads,
            samples_per_lead: n,
            values: vec![0.0; spec.leads * n],
            sample_rate: spec.sample_rate,
            labels: Vec::new(),
        }
    }

    pub fn lead(&self, i: usize) -> &[f64] {
        &self.values[i * self.samples_per_lead..(i + 1) * self.samples_per_lead]
    }

    /// `lead,rate_hz,v0,v1,…` header, then one row per lead.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lead,rate_hz");
        for k in 0..self.samples_per_lead {
            write!(out, ",v{k}").unwrap();
        }
        out.push('\n');
        for l in 0..self.leads {
            write!(out, "{l},{}", self.sample_rate).unwrap();
            for v in self.lead(l) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// One Gaussian wave: amplitude (mV), offset from the R peak (s), width (s).
#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: f64,
    at: f64,
    width: f64,
}

#[derive(Debug, Clone)]
struct BeatTemplate {
    waves: [Wave; 5],
    /// ST plateau height (mV) between QRS end and T onset.
    st_level: f64,
    st_start: f64,
    st_end: f64,
    gain: f64,
}

const T_INDEX: usize = 4;
const QRS: [usize; 3] = [1, 2, 3];

impl BeatTemplate {
    fn normal() -> Self {
        BeatTemplate {
            waves: [
                Wave {
                    amp: 0.15,
                    at: -0.18,
                    width: 0.025,
                },
                Wave {
                    amp: -0.12,
                    at: -0.035,
                    width: 0.010,
                },
                Wave {
                    amp: 1.10,
                    at: 0.0,
                    width: 0.012,
                },
                Wave {
                    amp: -0.30,
                    at: 0.035,
                    width: 0.010,
                },
                Wave {
                    amp: 0.30,
                    at: 0.28,
                    width: 0.045,
                },
            ],
            st_level: 0.0,
            st_start: 0.06,
            st_end: 0.20,
            gain: 1.0,
        }
    }

    fn apply(&mut self, class: EcgClass) {
        match class {
            EcgClass::Normal | EcgClass::IrregularRr => {}
            EcgClass::StElevation => self.st_level = 0.35,
            EcgClass::WideQrs => {
                for i in QRS {
                    self.waves[i].width *= 2.2;
                    self.waves[i].at *= 2.2;
                }
                self.st_start += 0.04;
            }
            EcgClass::LowVoltage => self.gain = 0.4,
            EcgClass::TallT => self.waves[T_INDEX].amp *= 2.6,
        }
    }

    fn value(&self, dt: f64) -> f64 {
        let mut v: f64 = self
            .waves
            .iter()
            .map(|w| {
                let z = (dt - w.at) / w.width;
                w.amp * (-0.5 * z * z).exp()
            })
            .sum();
        if self.st_level != 0.0 {
            // Smooth plateau: product of two logistic edges, 8 ms ramps.
            let rise = 1.0 / (1.0 + (-(dt - self.st_start) / 0.008).exp());
            let fall = 1.0 / (1.0 + ((dt - self.st_end) / 0.008).exp());
            v += self.st_level * rise * fall;
        }
        v * self.gain
    }
}

/// Relative amplitude of each lead.
fn lead_gain(lead: usize) -> f64 {
    const GAINS: [f64; 12] = [1.0, 0.8, 0.6, 1.2, 0.9, 0.7, 1.1, 0.85, 0.65, 1.05, 0.95, 0.75];
    GAINS[lead % GAINS.len()]
}

/// Deterministic synthesis of one recording carrying `classes`.
pub fn synth_signal(classes: &[EcgClass], spec: &SignalSpec, seed: u64) -> Result<EcgSignal> {
    if classes.is_empty() {
        return Err(Error::Validation("class set must not be empty".into()));
    }
    for (i, &a) in classes.iter().enumerate() {
        for &b in &classes[i + 1..] {
            if incompatible(a, b) {
                return Err(Error::Validation(format!("{} cannot co-occur with {}", a.id(), b.id())));
            }
        }
    }
    if spec.leads == 0 || spec.samples_per_lead() == 0 {
        return Err(Error::Validation("signal must have leads and samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut template = BeatTemplate::normal();
    for &c in classes {
        template.apply(c);
    }
    let irregular = classes.contains(&EcgClass::IrregularRr);

    let rr = 60.0 / rng.random_range(68.0..82.0);
    let mut beats = Vec::new();
    let mut t = rng.random_range(0.17..0.23);
    let duration = spec.duration_s;
    while t < duration + 0.5 {
        beats.push(t);
        let step = if irregular {
            // Alternate short and long intervals, each ≥ 25% off nominal.
            let dev = rng.random_range(0.25..0.40);
            let sign = if beats.len() % 2 == 0 { 1.0 } else { -1.0 };
            rr * (1.0 + sign * dev)
        } else {
            rr * (1.0 + rng.random_range(-0.03..0.03))
        };
        t += step;
    }
    let noise = Normal::new(0.0, 0.015).expect("valid deviation");
    let wander_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let n = spec.samples_per_lead();
    let mut values = Vec::with_capacity(spec.leads * n);
    for lead in 0..spec.leads {
        let g = lead_gain(lead);
        for k in 0..n {
            let time = k as f64 / spec.sample_rate;
            let beat: f64 = beats
                .iter()
                .filter(|&&b| (time - b).abs() < 0.6)
                .map(|&b| template.value(time - b))
                .sum();
            let wander = 0.03 * (std::f64::consts::TAU * 0.3 * time + wander_phase).sin();
            let v = g * beat + wander + noise.sample(&mut rng);
            values.push(v.clamp(-MAX_MV, MAX_MV));
        }
    }
    let mut labels = classes.to_vec();
    labels.sort();
    labels.dedup();
    Ok(EcgSignal {
        leads: spec.leads,
        samples_per_lead: n,
        values,
        sample_rate: spec.sample_rate,
        labels,
    })
}
