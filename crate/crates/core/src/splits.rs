//! Patient-grouped, center-balanced nested k-fold cross-validation, benign
//! undersampling, and leakage auditing.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{BiopsyCore, CoreMeta};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
}

/// One outer iteration of the nested protocol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leg {
    pub test_fold: usize,
    pub validation_fold: usize,
    pub train_folds: Vec<usize>,
}

impl Leg {
    pub fn role_of(&self, fold: usize) -> Role {
        if fold == self.test_fold {
            Role::Test
        } else if fold == self.validation_fold {
            Role::Validation
        } else {
            Role::Train
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "FoldPlanFile", from = "FoldPlanFile")]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Patient ids per fold. A valid plan lists each patient exactly once.
    pub folds: Vec<Vec<String>>,
    pub legs: Vec<Leg>,
}

/// Serialized form: the fold lists plus a derived patient → fold map.
#[derive(Serialize, Deserialize)]
struct FoldPlanFile {
    k: usize,
    seed: u64,
    assignments: BTreeMap<String, usize>,
    folds: Vec<Vec<String>>,
    legs: Vec<Leg>,
}

impl From<FoldPlan> for FoldPlanFile {
    fn from(p: FoldPlan) -> Self {
        Self {
            assignments: p.assignments(),
            k: p.k,
            seed: p.seed,
            folds: p.folds,
            legs: p.legs,
        }
    }
}

impl From<FoldPlanFile> for FoldPlan {
    fn from(f: FoldPlanFile) -> Self {
        Self {
            k: f.k,
            seed: f.seed,
            folds: f.folds,
            legs: f.legs,
        }
    }
}

impl FoldPlan {
    /// Patient → fold map. Patients listed in several folds keep the first.
    pub fn assignments(&self) -> BTreeMap<String, usize> {
        let mut map = BTreeMap::new();
        for (f, patients) in self.folds.iter().enumerate() {
            for p in patients {
                map.entry(p.clone()).or_insert(f);
            }
        }
        map
    }

    /// Patients holding `role` in leg `leg`.
    pub fn patients_in(&self, leg: usize, role: Role) -> BTreeSet<String> {
        let leg = &self.legs[leg];
        self.folds
            .iter()
            .enumerate()
            .filter(|(f, _)| leg.role_of(*f) == role)
            .flat_map(|(_, ps)| ps.iter().cloned())
            .collect()
    }
}

/// Deals patients to folds: within each center (in sorted center order) the
/// patients are shuffled and dealt round-robin, continuing the deal where the
/// previous center stopped so overall fold sizes also differ by at most one.
pub fn nested_kfold(patients: &[(String, u32)], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid("k must be at least 2"));
    }
    let unique: BTreeSet<&String> = patients.iter().map(|(p, _)| p).collect();
    if unique.len() != patients.len() {
        return Err(Error::invalid("patient ids must be unique"));
    }
    if k > patients.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the number of patients ({})",
            patients.len()
        )));
    }
    let mut by_center: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for (p, c) in patients {
        by_center.entry(*c).or_default().push(p.clone());
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0usize;
    for (center, mut members) in by_center {
        members.sort();
        members.shuffle(&mut seed::rng(seed, &[seed::label("fold"), center as u64]));
        for p in members {
            folds[next].push(p);
            next = (next + 1) % k;
        }
    }
    let legs = (0..k)
        .map(|i| Leg {
            test_fold: i,
            validation_fold: (i + 1) % k,
            train_folds: (0..k).filter(|&f| f != i && f != (i + 1) % k).collect(),
        })
        .collect();
    Ok(FoldPlan {
        k,
        seed,
        folds,
        legs,
    })
}

pub trait Labeled {
    fn label(&self) -> u8;
}

impl Labeled for BiopsyCore {
    fn label(&self) -> u8 {
        self.label
    }
}

impl Labeled for CoreMeta {
    fn label(&self) -> u8 {
        self.label
    }
}

/// Keeps every cancer core and a seeded random subset of benign cores of
/// the same size. Never upsamples: with fewer benign than cancer cores,
/// all cores are kept. Input order is preserved.
pub fn undersample_benign<T: Labeled + Clone>(cores: &[T], seed: u64) -> Result<Vec<T>> {
    let n_cancer = cores.iter().filter(|c| c.label() == 1).count();
    if n_cancer == 0 {
        return Err(Error::invalid("undersampling needs at least one cancer core"));
    }
    let mut benign: Vec<usize> = (0..cores.len()).filter(|&i| cores[i].label() == 0).collect();
    benign.shuffle(&mut seed::rng(seed, &[seed::label("undersample")]));
    let keep: BTreeSet<usize> = benign.into_iter().take(n_cancer).collect();
    Ok(cores
        .iter()
        .enumerate()
        .filter(|(i, c)| c.label() == 1 || keep.contains(i))
        .map(|(_, c)| c.clone())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageViolation {
    pub patient_id: String,
    /// `None` for patients that have cores but no fold.
    pub leg: Option<usize>,
    pub roles: Vec<Role>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub violations: Vec<LeakageViolation>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn patients(&self) -> BTreeSet<String> {
        self.violations.iter().map(|v| v.patient_id.clone()).collect()
    }
}

/// Reports every patient whose cores would appear under more than one role
/// in some leg, and every patient with cores but no fold.
pub fn audit_leakage<T: AsRef<str>>(plan: &FoldPlan, core_patients: &[T]) -> LeakageReport {
    let mut memberships: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (f, ps) in plan.folds.iter().enumerate() {
        for p in ps {
            memberships.entry(p.as_str()).or_default().push(f);
        }
    }
    let mut violations = Vec::new();
    let patients: BTreeSet<&str> = core_patients.iter().map(|p| p.as_ref()).collect();
    for p in patients {
        let Some(folds) = memberships.get(p) else {
            violations.push(LeakageViolation {
                patient_id: p.to_string(),
                leg: None,
                roles: Vec::new(),
            });
            continue;
        };
        for (i, leg) in plan.legs.iter().enumerate() {
            let roles: BTreeSet<Role> = folds.iter().map(|&f| leg.role_of(f)).collect();
            if roles.len() > 1 {
                violations.push(LeakageViolation {
                    patient_id: p.to_string(),
                    leg: Some(i),
                    roles: roles.into_iter().collect(),
                });
            }
        }
    }
    LeakageReport { violations }
}

/// Largest per-center spread (max − min patients per fold).
pub fn center_imbalance(plan: &FoldPlan, patients: &[(String, u32)]) -> usize {
    let center: BTreeMap<&str, u32> = patients.iter().map(|(p, c)| (p.as_str(), *c)).collect();
    let mut counts: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (f, ps) in plan.folds.iter().enumerate() {
        for p in ps {
            if let Some(&c) = center.get(p.as_str()) {
                counts.entry(c).or_insert_with(|| vec![0; plan.k])[f] += 1;
            }
        }
    }
    counts
        .values()
        .map(|v| v.iter().max().unwrap() - v.iter().min().unwrap())
        .max()
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn population(n: usize, centers: u32) -> Vec<(String, u32)> {
        (0..n).map(|i| (format!("p{i}"), i as u32 % centers)).collect()
    }

    #[derive(Clone, Debug, PartialEq)]
    struct C(u8, usize);
    impl Labeled for C {
        fn label(&self) -> u8 {
            self.0
        }
    }

    #[test]
    fn exact_divisibility_one_patient_per_center_per_fold() {
        let pop = population(10, 2);
        let plan = nested_kfold(&pop, 5, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 2));
        assert_eq!(center_imbalance(&plan, &pop), 0);
        for f in &plan.folds {
            let cs: BTreeSet<u32> = f.iter().map(|p| pop.iter().find(|x| &x.0 == p).unwrap().1).collect();
            assert_eq!(cs.len(), 2);
        }
    }

    #[test]
    fn legs_rotate_validation() {
        let plan = nested_kfold(&population(12, 3), 4, 0).unwrap();
        for (i, leg) in plan.legs.iter().enumerate() {
            assert_eq!(leg.test_fold, i);
            assert_eq!(leg.validation_fold, (i + 1) % 4);
            assert_eq!(leg.train_folds.len(), 2);
            assert!(!leg.train_folds.contains(&i));
        }
    }

    #[test]
    fn k_larger_than_population_fails() {
        assert!(nested_kfold(&population(3, 1), 4, 0).is_err());
        assert!(nested_kfold(&population(3, 1), 1, 0).is_err());
    }

    #[test]
    fn plan_is_seed_deterministic() {
        let pop = population(40, 5);
        assert_eq!(nested_kfold(&pop, 5, 9).unwrap(), nested_kfold(&pop, 5, 9).unwrap());
        assert_ne!(nested_kfold(&pop, 5, 9).unwrap(), nested_kfold(&pop, 5, 10).unwrap());
    }

    #[test]
    fn undersampling_cases() {
        let cores: Vec<C> = (0..20).map(|i| C((i % 5 == 0) as u8, i)).collect();
        let out = undersample_benign(&cores, 3).unwrap();
        assert_eq!(out.iter().filter(|c| c.0 == 1).count(), 4);
        assert_eq!(out.iter().filter(|c| c.0 == 0).count(), 4);
        assert_eq!(out, undersample_benign(&cores, 3).unwrap());

        let balanced: Vec<C> = (0..6).map(|i| C((i % 2) as u8, i)).collect();
        assert_eq!(undersample_benign(&balanced, 0).unwrap(), balanced);

        let few_benign: Vec<C> = vec![C(1, 0), C(1, 1), C(0, 2)];
        assert_eq!(undersample_benign(&few_benign, 0).unwrap(), few_benign);

        assert!(undersample_benign(&[C(0, 0)], 0).is_err());
    }

    #[test]
    fn full_cohort_undersampling() {
        let cores: Vec<C> = (0..6607).map(|i| C((i < 879) as u8, i)).collect();
        let out = undersample_benign(&cores, 1).unwrap();
        assert_eq!(out.len(), 2 * 879);
        assert_eq!(out.iter().filter(|c| c.0 == 1).count(), 879);
    }

    #[test]
    fn audit_detects_injected_duplicate() {
        let pop = population(20, 2);
        let mut plan = nested_kfold(&pop, 5, 4).unwrap();
        let cores: Vec<String> = pop.iter().map(|p| p.0.clone()).collect();
        assert!(audit_leakage(&plan, &cores).is_clean());
        let victim = plan.folds[0][0].clone();
        plan.folds[2].push(victim.clone());
        let report = audit_leakage(&plan, &cores);
        assert_eq!(report.patients(), BTreeSet::from([victim]));
        assert!(audit_leakage(&plan, &Vec::<String>::new()).is_clean());
    }

    #[test]
    fn audit_reports_unassigned_patient() {
        let plan = nested_kfold(&population(5, 1), 5, 0).unwrap();
        let report = audit_leakage(&plan, &["stranger"]);
        assert_eq!(report.violations[0].leg, None);
    }

    #[test]
    fn fold_plan_json_has_legs() {
        let plan = nested_kfold(&population(6, 2), 3, 0).unwrap();
        let json = serde_json::to_value(&plan).unwrap();
        assert_eq!(json["legs"][0]["validation_fold"], 1);
        assert_eq!(json["assignments"].as_object().unwrap().len(), 6);
        let back: FoldPlan = serde_json::from_value(json).unwrap();
        assert_eq!(back, plan);
    }
}
