//! Yes/no attribute probes over generated descriptions.
//!
//! Probes for an image are all of its true attributes (answer yes) plus as
//! many seeded absent attributes from the vocabulary (answer no). The
//! description "answers yes" when it contains the probe phrase.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, EvalError};
use crate::encoders::fnv1a64;
use crate::fcd::{
    assemble_prompt, canonical_phrase, parse_structured_description, DescriptionGenerator, DescriptionInput, Slot,
    SlotAttributes, OBJECT_TEMPLATE, SYSTEM_TEMPLATE,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeMetrics {
    pub accuracy: f64,
    /// `None` when no probe was answered yes.
    pub precision: Option<f64>,
    pub probes: usize,
}

/// Accuracy and precision over `(predicted, truth)` answers.
pub fn pope_metrics(answers: &[(bool, bool)]) -> Result<PopeMetrics, EvalError> {
    if answers.is_empty() {
        return Err(EvalError::Validation("no probe answers".into()));
    }
    let correct = answers.iter().filter(|(p, t)| p == t).count();
    let predicted_yes = answers.iter().filter(|(p, _)| *p).count();
    let true_yes = answers.iter().filter(|(p, t)| *p && *t).count();
    Ok(PopeMetrics {
        accuracy: correct as f64 / answers.len() as f64,
        precision: (predicted_yes > 0).then(|| true_yes as f64 / predicted_yes as f64),
        probes: answers.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub slot: Slot,
    pub phrase: String,
    pub truth: bool,
}

/// Present attributes plus an equal number (when available) of absent ones.
pub fn build_probes(truth: &SlotAttributes, vocabulary: &[(Slot, String)], seed: u64) -> Vec<Probe> {
    let present: BTreeSet<(Slot, String)> = truth
        .iter()
        .flat_map(|(s, v)| v.iter().map(move |p| (*s, canonical_phrase(p))))
        .collect();
    let mut absent: Vec<(Slot, String)> = vocabulary
        .iter()
        .map(|(s, p)| (*s, canonical_phrase(p)))
        .filter(|x| !present.contains(x))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    absent.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    absent.truncate(present.len());
    present
        .into_iter()
        .map(|(slot, phrase)| Probe { slot, phrase, truth: true })
        .chain(absent.into_iter().map(|(slot, phrase)| Probe { slot, phrase, truth: false }))
        .collect()
}

/// Describes every manifest image with `generator` and scores the probes.
pub fn pope_evaluate(manifest: &DatasetManifest, generator: &dyn DescriptionGenerator, seed: u64) -> Result<PopeMetrics, EvalError> {
    let vocabulary: Vec<(Slot, String)> = manifest
        .entries
        .iter()
        .flat_map(|e| e.attributes.iter().flat_map(|(s, v)| v.iter().map(|p| (*s, canonical_phrase(p)))))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let prompt = assemble_prompt(SYSTEM_TEMPLATE, &[], OBJECT_TEMPLATE).map_err(|e| EvalError::Validation(e.to_string()))?;
    let mut answers = Vec::new();
    for e in &manifest.entries {
        let key = e.image_key(manifest.mode);
        let text = generator
            .describe(DescriptionInput {
                image_key: &key,
                visible: &e.attributes,
                prompt: &prompt,
            })
            .map_err(|err| EvalError::Validation(format!("{key}: {err}")))?;
        let d = parse_structured_description(&text).map_err(|err| EvalError::Validation(format!("{key}: {err}")))?;
        let said: BTreeSet<(Slot, String)> = d.phrases().map(|(s, p)| (s, canonical_phrase(p))).collect();
        for probe in build_probes(&e.attributes, &vocabulary, seed ^ fnv1a64(key.as_bytes())) {
            answers.push((said.contains(&(probe.slot, probe.phrase)), probe.truth));
        }
    }
    pope_metrics(&answers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcd::{NoisyGenerator, TemplateGenerator};
    use crate::eval::{ManifestEntry, ManifestMode};

    #[test]
    fn confusion_examples() {
        // 10 probes, 8 correct
        let mut a = vec![(true, true); 4];
        a.extend([(false, false); 4]);
        a.extend([(true, false), (false, true)]);
        let m = pope_metrics(&a).unwrap();
        assert!((m.accuracy - 0.8).abs() < 1e-12);
        // 5 predicted yes, 4 truly yes
        assert!((m.precision.unwrap() - 0.8).abs() < 1e-12);
        let perfect = pope_metrics(&[(true, true), (false, false)]).unwrap();
        assert_eq!((perfect.accuracy, perfect.precision), (1.0, Some(1.0)));
        let none_yes = pope_metrics(&[(false, true), (false, false)]).unwrap();
        assert_eq!(none_yes.precision, None);
        assert!(pope_metrics(&[]).is_err());
    }

    fn manifest() -> DatasetManifest {
        let entry = |label: &str, pairs: &[(Slot, &str)]| {
            let mut attributes = SlotAttributes::new();
            for (s, p) in pairs {
                attributes.entry(*s).or_default().push((*p).to_owned());
            }
            ManifestEntry {
                image_path: format!("{label}.jpg"),
                bbox: None,
                identity_label: label.into(),
                descriptions: vec![],
                attributes,
            }
        };
        DatasetManifest {
            mode: ManifestMode::Cropped,
            entries: vec![
                entry("a", &[(Slot::Head, "black hair"), (Slot::Upper, "red jacket")]),
                entry("b", &[(Slot::Head, "white hat"), (Slot::Lower, "blue jeans")]),
                entry("c", &[(Slot::Upper, "green coat"), (Slot::Accessories, "black backpack")]),
            ],
            base_dir: ".".into(),
        }
    }

    #[test]
    fn faithful_generator_scores_perfectly() {
        let m = pope_evaluate(&manifest(), &TemplateGenerator, 1).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.probes, 12);
    }

    #[test]
    fn hallucinating_generator_loses_precision() {
        let man = manifest();
        let mut vocabulary = SlotAttributes::new();
        for e in &man.entries {
            for (s, v) in &e.attributes {
                vocabulary.entry(*s).or_default().extend(v.iter().cloned());
            }
        }
        let noisy = NoisyGenerator {
            drop_prob: 0.0,
            hallucination_prob: 1.0,
            vocabulary,
            seed: 3,
        };
        let m = pope_evaluate(&man, &noisy, 1).unwrap();
        assert!(m.accuracy <= 1.0);
        assert!(m.precision.unwrap() <= 1.0);
        assert_eq!(pope_evaluate(&man, &noisy, 1).unwrap(), m);
    }

    #[test]
    fn probes_are_balanced_and_seeded() {
        let truth = manifest().entries[0].attributes.clone();
        let vocab: Vec<(Slot, String)> = ["white hat", "blue jeans", "green coat", "black hair"]
            .iter()
            .map(|p| (crate::fcd::classify_phrase(p).unwrap(), p.to_string()))
            .collect();
        let p = build_probes(&truth, &vocab, 5);
        assert_eq!(p.iter().filter(|x| x.truth).count(), 2);
        assert_eq!(p.iter().filter(|x| !x.truth).count(), 2);
        assert!(p.iter().filter(|x| !x.truth).all(|x| x.phrase != "black hair"));
        assert_eq!(build_probes(&truth, &vocab, 5), p);
    }
}
