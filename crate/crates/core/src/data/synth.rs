use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{PlausibilityBounds, RawVisit, CORPUS_FILES, FEATURE_NAMES, NUM_FEATURES};
use crate::error::{Error, Result};

/// Population mean and spread used to turn z-units into physical readings
/// (temperature in Celsius).
pub const REFERENCE_SCALES: [(f64, f64); NUM_FEATURES] = [
    (37.0, 0.7),
    (85.0, 15.0),
    (18.0, 3.0),
    (94.0, 1.5),
    (130.0, 20.0),
    (80.0, 12.0),
    (5.0, 1.2),
    (3.0, 0.4),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitalShift {
    pub feature: String,
    /// Mean shift in z-units.
    pub shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    /// ICD-10 code written to the diagnosis file, without the dot.
    pub code: String,
    pub title: String,
    pub signature: Vec<String>,
    #[serde(default)]
    pub vital_shifts: Vec<VitalShift>,
}

/// Where a synthetic class's distinguishing signal lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalModality {
    Text,
    Vitals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<SynthClass>,
    pub noise_tokens: Vec<String>,
    /// Chance that each of the `max_noise_tokens` slots receives a noise token.
    pub noise_rate: f64,
    pub max_noise_tokens: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn class(code: &str, title: &str, signature: &str, shifts: &[(&str, f64)]) -> SynthClass {
    SynthClass {
        code: code.to_string(),
        title: title.to_string(),
        signature: words(signature),
        vital_shifts: shifts
            .iter()
            .map(|&(f, s)| VitalShift {
                feature: f.to_string(),
                shift: s,
            })
            .collect(),
    }
}

impl Default for SynthSpec {
    /// Ten classes: five share one complaint and differ only by a shifted
    /// vital, five have their own complaint and unshifted vitals.
    fn default() -> Self {
        let shared = "feeling unwell";
        Self {
            classes: vec![
                class("R509", "Fever, unspecified", shared, &[("temperature", 2.0)]),
                class("I4891", "Atrial fibrillation", shared, &[("heartrate", 2.0)]),
                class("A419", "Sepsis, unspecified organism", shared, &[("resprate", 2.0)]),
                class("J9600", "Acute respiratory failure", shared, &[("o2sat", -2.0)]),
                class("I639", "Cerebral infarction", shared, &[("sbp", 2.0)]),
                class("D649", "Anemia, unspecified", "low hemoglobin", &[]),
                class("J45909", "Asthma, uncomplicated", "wheezing sob", &[]),
                class("T7840XA", "Allergy, unspecified", "allergic reaction", &[]),
                class("R45851", "Suicidal ideations", "suicidal ideation", &[]),
                class("S72001A", "Fracture of femoral neck", "hip fracture", &[]),
            ],
            noise_tokens: words(
                "pain nausea vomiting cough headache dizziness back chest abdominal fall since yesterday ams eval",
            ),
            noise_rate: 0.5,
            max_noise_tokens: 3,
            samples_per_class: 500,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes.len() < 2 {
            return fail("a synthetic corpus needs at least two classes".into());
        }
        if self.samples_per_class == 0 {
            return fail("samples_per_class must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return fail(format!("noise_rate {} is outside [0, 1]", self.noise_rate));
        }
        if self.noise_rate > 0.0 && self.max_noise_tokens > 0 && self.noise_tokens.is_empty() {
            return fail("noise_rate > 0 needs a noise vocabulary".into());
        }
        let mut categories = std::collections::BTreeSet::new();
        for c in &self.classes {
            if c.signature.is_empty() {
                return fail(format!("class `{}` has an empty signature", c.code));
            }
            let cat = super::truncate_icd(&c.code)?;
            if !categories.insert(cat.clone()) {
                return fail(format!("two classes share category `{cat}`"));
            }
            for s in &c.vital_shifts {
                if !FEATURE_NAMES.contains(&s.feature.as_str()) {
                    return fail(format!("unknown feature `{}` in class `{}`", s.feature, c.code));
                }
                if !s.shift.is_finite() {
                    return fail(format!("non-finite shift in class `{}`", c.code));
                }
            }
        }
        Ok(())
    }

    /// Category of every class mapped to where its signal lives.
    pub fn truth(&self) -> Result<BTreeMap<String, SignalModality>> {
        self.classes
            .iter()
            .map(|c| {
                let m = if c.vital_shifts.iter().any(|s| s.shift != 0.0) {
                    SignalModality::Vitals
                } else {
                    SignalModality::Text
                };
                Ok((super::truncate_icd(&c.code)?, m))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub visits: Vec<RawVisit>,
    pub truth: BTreeMap<String, SignalModality>,
    pub titles: BTreeMap<String, String>,
}

/// Draws `samples_per_class` visits for every class, shuffled together.
/// Vitals are standard normal plus the class shifts, mapped to physical units
/// through [`REFERENCE_SCALES`] and cleaned with the default plausibility bounds.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bounds = PlausibilityBounds::default();
    let mut order: Vec<usize> = (0..spec.classes.len())
        .flat_map(|c| std::iter::repeat_n(c, spec.samples_per_class))
        .collect();
    order.shuffle(&mut rng);

    let mut visits = Vec::with_capacity(order.len());
    for (i, &c) in order.iter().enumerate() {
        let class = &spec.classes[c];
        let mut tokens = class.signature.clone();
        for _ in 0..spec.max_noise_tokens {
            if rng.random_bool(spec.noise_rate) {
                let t = &spec.noise_tokens[rng.random_range(0..spec.noise_tokens.len())];
                tokens.push(t.clone());
            }
        }
        tokens.shuffle(&mut rng);

        let mut vitals = [None; NUM_FEATURES];
        for (j, v) in vitals.iter_mut().enumerate() {
            let mut z: f64 = StandardNormal.sample(&mut rng);
            z += class
                .vital_shifts
                .iter()
                .filter(|s| s.feature == FEATURE_NAMES[j])
                .map(|s| s.shift)
                .sum::<f64>();
            let (mean, std) = REFERENCE_SCALES[j];
            *v = bounds.clean(j, mean + std * z);
        }
        visits.push(RawVisit {
            stay_id: format!("{}", 30_000_000 + i),
            chief_complaint: tokens.join(" "),
            vitals,
            icd_code: class.code.clone(),
            icd_version: 10,
        });
    }
    let titles = spec
        .classes
        .iter()
        .map(|c| Ok((super::truncate_icd(&c.code)?, c.title.clone())))
        .collect::<Result<_>>()?;
    Ok(SynthCorpus {
        visits,
        truth: spec.truth()?,
        titles,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the corpus as `edstays.csv`, `triage.csv`, `diagnosis.csv` and
/// `truth.json` under `dir`. Temperature is written in Fahrenheit, and every
/// fourth stay gets a secondary diagnosis row, as in the source data.
pub fn write_corpus_csv(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [e, t, d] = CORPUS_FILES.map(|f| dir.join(f));

    let mut stays = csv::Writer::from_path(e)?;
    stays.write_record(["subject_id", "stay_id"])?;
    let mut triage = csv::Writer::from_path(t)?;
    let mut header = vec!["stay_id"];
    header.extend(FEATURE_NAMES);
    header.push("chiefcomplaint");
    triage.write_record(&header)?;
    let mut diag = csv::Writer::from_path(d)?;
    diag.write_record([
        "subject_id",
        "stay_id",
        "seq_num",
        "icd_code",
        "icd_version",
        "icd_title",
    ])?;

    for (i, v) in corpus.visits.iter().enumerate() {
        let subject = format!("{}", 10_000_000 + i);
        stays.write_record([subject.as_str(), &v.stay_id])?;
        let mut row = vec![v.stay_id.clone()];
        row.push(fmt_opt(v.vitals[0].map(|c| c * 9.0 / 5.0 + 32.0)));
        row.extend(v.vitals[1..].iter().map(|x| fmt_opt(*x)));
        row.push(v.chief_complaint.clone());
        triage.write_record(&row)?;
        let cat = super::truncate_icd(&v.icd_code)?;
        let title = corpus.titles.get(&cat).map(String::as_str).unwrap_or("");
        diag.write_record([subject.as_str(), &v.stay_id, "1", &v.icd_code, "10", title])?;
        if i % 4 == 3 {
            diag.write_record([subject.as_str(), &v.stay_id, "2", "R69", "10", "Illness, unspecified"])?;
        }
    }
    stays.flush()?;
    triage.flush()?;
    diag.flush()?;
    let truth = serde_json::to_value(&corpus.truth)?;
    fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&truth)?)?;
    Ok(())
}
