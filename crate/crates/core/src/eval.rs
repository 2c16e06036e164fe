//! Greedy-decoding accuracy on held-out QA.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GamsiModel;
use crate::objective::Example;
use crate::scalar::Scalar;
use crate::synth::{TaskType, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub samples: usize,
    /// Keyed by task name; tasks absent from the data are omitted.
    pub per_task: BTreeMap<String, TaskAccuracy>,
    /// Unweighted mean of the per-task accuracies.
    pub macro_accuracy: f64,
    /// Fraction of all samples answered exactly.
    pub overall_accuracy: f64,
}

impl EvalReport {
    pub fn from_outcomes(outcomes: &[(TaskType, bool)]) -> Self {
        let mut per_task: BTreeMap<String, TaskAccuracy> = BTreeMap::new();
        for &(task, ok) in outcomes {
            let e = per_task.entry(task.name().to_string()).or_insert(TaskAccuracy {
                correct: 0,
                total: 0,
                accuracy: 0.0,
            });
            e.total += 1;
            e.correct += ok as usize;
        }
        for t in per_task.values_mut() {
            t.accuracy = t.correct as f64 / t.total as f64;
        }
        let macro_accuracy = if per_task.is_empty() {
            0.0
        } else {
            per_task.values().map(|t| t.accuracy).sum::<f64>() / per_task.len() as f64
        };
        let correct = outcomes.iter().filter(|o| o.1).count();
        Self {
            samples: outcomes.len(),
            per_task,
            macro_accuracy,
            overall_accuracy: if outcomes.is_empty() {
                0.0
            } else {
                correct as f64 / outcomes.len() as f64
            },
        }
    }

    pub fn accuracy(&self, task: TaskType) -> Option<f64> {
        self.per_task.get(task.name()).map(|t| t.accuracy)
    }

    /// Checks internal consistency of a parsed report.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("invalid report: {m}")));
        let mut total = 0;
        for (name, t) in &self.per_task {
            TaskType::parse(name)?;
            if t.correct > t.total || t.total == 0 {
                return bad(format!("{name} has {}/{}", t.correct, t.total));
            }
            if (t.accuracy - t.correct as f64 / t.total as f64).abs() > 1e-12 {
                return bad(format!("{name} accuracy disagrees with its counts"));
            }
            total += t.total;
        }
        if total != self.samples {
            return bad(format!("task totals {total} differ from samples {}", self.samples));
        }
        let mac = if self.per_task.is_empty() {
            0.0
        } else {
            self.per_task.values().map(|t| t.accuracy).sum::<f64>() / self.per_task.len() as f64
        };
        if (mac - self.macro_accuracy).abs() > 1e-12 {
            return bad("macro accuracy disagrees with per-task values".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }
}

/// How answers are decoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    /// Argmax over the whole vocabulary.
    Free,
    /// Argmax over the answer tokens of each example's task.
    Options(Vocab),
}

/// Greedy-decodes every example's answer and scores exact matches.
pub fn evaluate<T: Scalar>(model: &GamsiModel<T>, data: &[Example<T>], decoding: Decoding) -> Result<EvalReport> {
    let outcomes = data
        .par_iter()
        .map(|ex| {
            let n = ex.answer.len();
            let out = match decoding {
                Decoding::Free => model.generate(&ex.patches, &ex.question, n)?,
                Decoding::Options(v) => model.generate_among(&ex.patches, &ex.question, n, &v.answers(ex.task))?,
            };
            Ok((ex.task, out == ex.answer))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_outcomes(&outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn macro_average_weights_tasks_equally() {
        let mut o = vec![(TaskType::ObjectCount, true); 9];
        o.push((TaskType::ObjectCount, false));
        o.push((TaskType::ViewChange, false));
        let r = EvalReport::from_outcomes(&o);
        assert_eq!(r.samples, 11);
        assert!((r.macro_accuracy - 0.45).abs() < 1e-12);
        assert!((r.overall_accuracy - 9.0 / 11.0).abs() < 1e-12);
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn untrained_model_scores_near_chance_on_four_way_questions() {
        use crate::config::RunConfig;
        use crate::synth::{make_sample, mix_seed};
        use crate::train::to_examples;
        let cfg = RunConfig::toy();
        let synth = cfg.data.synth();
        let model = GamsiModel::<f32>::new(&cfg.model_config()).unwrap();
        let samples: Vec<_> = (0..400)
            .map(|i| make_sample(&synth, 4, 16, mix_seed(9, i), TaskType::RelativeDirection))
            .collect();
        let data = to_examples(&model, &samples).unwrap();
        let r = evaluate(&model, &data, Decoding::Options(synth.vocab())).unwrap();
        let acc = r.accuracy(TaskType::RelativeDirection).unwrap();
        assert!((acc - 0.25).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn validator_rejects_inconsistent_reports() {
        let r = EvalReport::from_outcomes(&[(TaskType::ObjectCount, true), (TaskType::ViewChange, false)]);
        let mut v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        v["macro_accuracy"] = serde_json::json!(0.9);
        assert!(EvalReport::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        v["per_task"]["spelling"] = serde_json::json!({"correct": 1, "total": 1, "accuracy": 1.0});
        assert!(EvalReport::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        v["extra"] = serde_json::json!(true);
        assert!(EvalReport::from_json(&v.to_string()).is_err());
    }
}
