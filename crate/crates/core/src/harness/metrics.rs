use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, AttackSpec};
use crate::error::{Error, Result};
use crate::harness::data::DatasetHandle;
use crate::model::{Batch, Model};
use crate::numeric::{Norm, RngStream};

/// Stream reserved for evaluation attacks.
pub const EVAL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub natural_acc: f64,
    pub robust_acc_linf: f64,
    pub robust_acc_l2: f64,
    pub union: f64,
    pub per_class_correct: Vec<u64>,
    pub per_class_total: Vec<u64>,
    pub wall_time_ms: u64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Format {
            offset: e.column() as u64,
            message: format!("metrics record: {e}"),
        })
    }

    pub fn union_consistent(&self) -> bool {
        self.union == union(self.robust_acc_linf, self.robust_acc_l2)
    }
}

/// Mean of the l-inf and l2 robust accuracies.
pub fn union(linf: f64, l2: f64) -> f64 {
    (linf + l2) / 2.0
}

/// Union of two figures already rounded to `decimals` places, rounded half
/// up in decimal (so 56.885 reports as 56.89, independent of binary
/// representation).
pub fn union_rounded(linf: f64, l2: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let a = (linf * scale).round() as i64;
    let b = (l2 * scale).round() as i64;
    let sum = a + b;
    let half_up = if sum >= 0 { (sum + 1).div_euclid(2) } else { -((-sum) / 2) };
    half_up as f64 / scale
}

/// Fraction of examples still classified correctly after the attack.
pub fn robust_accuracy(model: &Model, batch: &Batch, spec: &AttackSpec, rng: &mut RngStream) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let adv = pgd_attack(model, batch, spec, rng)?;
    let preds = model.predict(&adv)?;
    Ok(accuracy(&preds, &batch.labels))
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Clean accuracy, PGD robust accuracy under each norm, union and per-class
/// clean tallies on the test split.
pub fn evaluate(model: &Model, data: &DatasetHandle, linf: &AttackSpec, l2: &AttackSpec) -> Result<MetricsRecord> {
    if linf.norm != Norm::Linf || l2.norm != Norm::L2 {
        return Err(Error::Config("evaluate needs one l-inf and one l2 attack".into()));
    }
    let test = &data.test;
    if test.is_empty() {
        return Err(Error::Domain("evaluation on an empty test split".into()));
    }
    let preds = model.predict(&test.inputs)?;
    let mut per_class_correct = vec![0u64; data.k];
    let mut per_class_total = vec![0u64; data.k];
    for (p, &l) in preds.iter().zip(&test.labels) {
        per_class_total[l] += 1;
        if *p == l {
            per_class_correct[l] += 1;
        }
    }
    let natural_acc = accuracy(&preds, &test.labels);
    let robust_acc_linf = robust_accuracy(model, test, linf, &mut RngStream::new(0, EVAL_STREAM))?;
    let robust_acc_l2 = robust_accuracy(model, test, l2, &mut RngStream::new(0, EVAL_STREAM))?;
    Ok(MetricsRecord {
        epoch: 0,
        natural_acc,
        robust_acc_linf,
        robust_acc_l2,
        union: union(robust_acc_linf, robust_acc_l2),
        per_class_correct,
        per_class_total,
        wall_time_ms: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::gen_gaussians;
    use crate::model::Activation;

    #[test]
    fn table_values() {
        assert_eq!(union_rounded(46.07, 58.11, 2), 52.09);
        assert_eq!(union_rounded(46.65, 67.12, 2), 56.89);
        assert!((union(46.65, 67.12) - 56.885).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_robust_equals_natural() {
        let data = gen_gaussians(2, 40, 60, 3, 2, 0.4).unwrap();
        let model = Model::init(vec![3, 5, 2], Activation::Relu, &mut RngStream::new(1, 1)).unwrap();
        let r = evaluate(
            &model,
            &data,
            &AttackSpec::evaluation(Norm::Linf, 0.0),
            &AttackSpec::evaluation(Norm::L2, 0.0),
        )
        .unwrap();
        assert_eq!(r.robust_acc_linf, r.natural_acc);
        assert_eq!(r.robust_acc_l2, r.natural_acc);
        assert!(r.union_consistent());
        assert_eq!(r.per_class_total.iter().sum::<u64>(), 60);
        let back = MetricsRecord::from_json_line(&r.to_json_line()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let data = gen_gaussians(2, 40, 60, 3, 2, 0.4).unwrap();
        let model = Model::init(vec![3, 5, 2], Activation::Tanh, &mut RngStream::new(1, 1)).unwrap();
        let a = AttackSpec::evaluation(Norm::Linf, 0.1);
        let b = AttackSpec::evaluation(Norm::L2, 0.3);
        assert_eq!(evaluate(&model, &data, &a, &b).unwrap(), evaluate(&model, &data, &a, &b).unwrap());
        assert!(evaluate(&model, &data, &b, &a).is_err());
    }
}
