use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, SplitKind};
use crate::error::{Error, Result};
use crate::seed;

/// Requested split sizes. `anomaly_ratio = None` samples the unlabeled pool without regard to
/// hidden labels (for real unlabeled data that carries none).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub n_normal: usize,
    pub n_unlabeled: usize,
    pub anomaly_ratio: Option<f64>,
    pub n_test_normal: usize,
    pub n_test_abnormal: usize,
    pub seed: u64,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(ar) = self.anomaly_ratio {
            if !(0.0..=1.0).contains(&ar) {
                return Err(Error::validation(format!("anomaly_ratio {ar} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Number of abnormal images mixed into the unlabeled set (half-away-from-zero rounding).
    pub fn unlabeled_abnormal_count(&self) -> Option<usize> {
        self.anomaly_ratio.map(|ar| (ar * self.n_unlabeled as f64).round() as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestItem {
    pub path: String,
    pub label: u8,
}

/// Metadata about how the unlabeled set was mixed. Never consumed by training code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub anomaly_ratio: Option<f64>,
    pub unlabeled_abnormal: Option<usize>,
    pub seed: u64,
}

/// Resolved `(D_n, D_u, D_t)`. The unlabeled set carries paths only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub base_dir: PathBuf,
    pub normal: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<TestItem>,
    pub meta: SplitMeta,
}

impl DatasetSplit {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Training view of the normal-only module.
    pub fn ndm_view(&self) -> Vec<String> {
        self.normal.clone()
    }

    /// Training view of the unknown-distribution module: `D_n ∪ D_u`.
    pub fn udm_view(&self) -> Vec<String> {
        let mut v = self.normal.clone();
        v.extend(self.unlabeled.iter().cloned());
        v
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::blob::write_json(path, self)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        crate::blob::read_json(path)
    }
}

fn draw(pool: &[String], k: usize, what: &str, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
    if k > pool.len() {
        return Err(Error::Capacity { what: what.into(), required: k, available: pool.len() });
    }
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    let mut chosen: Vec<String> = shuffled.into_iter().take(k).collect();
    chosen.sort();
    Ok(chosen)
}

/// Sample `(D_n, D_u, D_t)` from the manifest pools without replacement.
pub fn build_splits(manifest: &Manifest, cfg: &SplitConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let pool = |split: SplitKind, label: Option<Option<u8>>| -> Vec<String> {
        manifest
            .entries
            .iter()
            .filter(|e| e.split == split && label.is_none_or(|l| e.label == l))
            .map(|e| e.path.clone())
            .collect()
    };
    let rng = |i: u64| ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, seed::tags::SPLIT, i));

    let normal = draw(&pool(SplitKind::Normal, None), cfg.n_normal, "normal set", &mut rng(0))?;

    let (unlabeled, unlabeled_abnormal) = match cfg.unlabeled_abnormal_count() {
        Some(n_abn) => {
            let hidden_missing = manifest.entries.iter().any(|e| e.split == SplitKind::Unlabeled && e.label.is_none());
            if hidden_missing && cfg.n_unlabeled > 0 {
                return Err(Error::validation(
                    "anomaly-ratio mixing needs hidden labels on every unlabeled-pool entry",
                ));
            }
            let mut u = draw(
                &pool(SplitKind::Unlabeled, Some(Some(1))),
                n_abn,
                "abnormal images of the unlabeled pool",
                &mut rng(1),
            )?;
            u.extend(draw(
                &pool(SplitKind::Unlabeled, Some(Some(0))),
                cfg.n_unlabeled - n_abn,
                "normal images of the unlabeled pool",
                &mut rng(2),
            )?);
            u.sort();
            (u, Some(n_abn))
        }
        None => (draw(&pool(SplitKind::Unlabeled, None), cfg.n_unlabeled, "unlabeled set", &mut rng(3))?, None),
    };

    let mut test: Vec<TestItem> =
        draw(&pool(SplitKind::Test, Some(Some(0))), cfg.n_test_normal, "normal test images", &mut rng(4))?
            .into_iter()
            .map(|path| TestItem { path, label: 0 })
            .collect();
    test.extend(
        draw(&pool(SplitKind::Test, Some(Some(1))), cfg.n_test_abnormal, "abnormal test images", &mut rng(5))?
            .into_iter()
            .map(|path| TestItem { path, label: 1 }),
    );
    test.sort_by(|a, b| a.path.cmp(&b.path));

    Ok(DatasetSplit {
        base_dir: manifest.base_dir.clone(),
        normal,
        unlabeled,
        test,
        meta: SplitMeta { anomaly_ratio: cfg.anomaly_ratio, unlabeled_abnormal, seed: cfg.seed },
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::data::manifest::ManifestEntry;

    fn pool_manifest(n_normal: usize, n_unl_norm: usize, n_unl_abn: usize, n_test: usize) -> Manifest {
        let mut entries = Vec::new();
        let mut push = |prefix: &str, n: usize, split, label| {
            for i in 0..n {
                entries.push(ManifestEntry { path: format!("{prefix}_{i:05}.png"), split, label });
            }
        };
        push("n", n_normal, SplitKind::Normal, Some(0));
        push("un", n_unl_norm, SplitKind::Unlabeled, Some(0));
        push("ua", n_unl_abn, SplitKind::Unlabeled, Some(1));
        push("tn", n_test, SplitKind::Test, Some(0));
        push("ta", n_test, SplitKind::Test, Some(1));
        Manifest { entries, base_dir: PathBuf::from(".") }
    }

    fn cfg(n_unlabeled: usize, ar: f64) -> SplitConfig {
        SplitConfig {
            n_normal: 10,
            n_unlabeled,
            anomaly_ratio: Some(ar),
            n_test_normal: 5,
            n_test_abnormal: 5,
            seed: 7,
        }
    }

    fn abnormal_in_unlabeled(s: &DatasetSplit) -> usize {
        s.unlabeled.iter().filter(|p| p.starts_with("ua")).count()
    }

    #[test]
    fn zero_and_full_anomaly_ratio() {
        let m = pool_manifest(20, 100, 100, 10);
        assert_eq!(abnormal_in_unlabeled(&build_splits(&m, &cfg(100, 0.0)).unwrap()), 0);
        assert_eq!(abnormal_in_unlabeled(&build_splits(&m, &cfg(100, 1.0)).unwrap()), 100);
    }

    #[test]
    fn sixty_percent_of_four_thousand() {
        let m = pool_manifest(20, 2000, 3000, 10);
        let s = build_splits(&m, &cfg(4000, 0.6)).unwrap();
        assert_eq!(abnormal_in_unlabeled(&s), 2400);
        assert_eq!(s.unlabeled.len(), 4000);
        assert_eq!(s.meta.unlabeled_abnormal, Some(2400));
    }

    #[test]
    fn half_rounds_away_from_zero() {
        // 0.5 * 5 = 2.5 -> 3
        assert_eq!(cfg(5, 0.5).unlabeled_abnormal_count(), Some(3));
        assert_eq!(cfg(3, 0.5).unlabeled_abnormal_count(), Some(2));
    }

    #[test]
    fn insufficient_pool_reports_capacity() {
        let m = pool_manifest(20, 10, 10, 10);
        match build_splits(&m, &cfg(100, 0.5)).unwrap_err() {
            Error::Capacity { required, available, .. } => {
                assert_eq!((required, available), (50, 10));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let m = pool_manifest(40, 60, 60, 10);
        let a = build_splits(&m, &cfg(50, 0.4)).unwrap();
        let b = build_splits(&m, &cfg(50, 0.4)).unwrap();
        assert_eq!(a, b);
        let n: HashSet<_> = a.normal.iter().collect();
        let u: HashSet<_> = a.unlabeled.iter().collect();
        let t: HashSet<_> = a.test.iter().map(|t| &t.path).collect();
        assert!(n.is_disjoint(&u) && n.is_disjoint(&t) && u.is_disjoint(&t));
        let mut other = cfg(50, 0.4);
        other.seed = 8;
        assert_ne!(build_splits(&m, &other).unwrap().normal, a.normal);
    }

    #[test]
    fn udm_view_is_union() {
        let m = pool_manifest(20, 20, 20, 10);
        let s = build_splits(&m, &cfg(10, 0.5)).unwrap();
        assert_eq!(s.udm_view().len(), 20);
        assert_eq!(s.ndm_view(), s.normal);
    }
}
