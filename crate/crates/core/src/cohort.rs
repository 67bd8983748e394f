//! Cohort ingestion, GOS label binarization, and patient-stratified
//! train/test splitting. Slices never cross their patient's fold.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{shuffle, RngStream};

pub const GCS_MIN: u8 = 3;
pub const GCS_MAX: u8 = 15;
pub const GOS_MIN: u8 = 1;
pub const GOS_MAX: u8 = 5;

/// GOS threshold for a favorable prognosis: favorable iff gos ≥ threshold.
pub const DEFAULT_FAVORABLE_GOS: u8 = 4;

/// One patient: identity, scores, and the ordered slice paths.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub gcs: u8,
    pub gos: u8,
    pub slices: Vec<PathBuf>,
}

/// One CT slice with the per-patient fields copied in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceRecord {
    pub patient_id: String,
    pub slice_path: PathBuf,
    pub gcs: u8,
    /// 1 = favorable, 0 = unfavorable; derived solely from the patient GOS.
    pub label: u8,
}

/// A patient-level fold assignment, reproducible from its seed.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitPlan {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

fn validate(rec: &PatientRecord, line: usize) -> Result<()> {
    let fail = |msg: String| Err(Error::Manifest { line, msg });
    if rec.patient_id.is_empty() {
        return fail("empty patient_id".into());
    }
    if !(GCS_MIN..=GCS_MAX).contains(&rec.gcs) {
        return fail(format!("patient {}: gcs {} outside [3, 15]", rec.patient_id, rec.gcs));
    }
    if !(GOS_MIN..=GOS_MAX).contains(&rec.gos) {
        return fail(format!("patient {}: gos {} outside [1, 5]", rec.patient_id, rec.gos));
    }
    if rec.slices.is_empty() {
        return fail(format!("patient {}: empty slice list", rec.patient_id));
    }
    Ok(())
}

/// Read a JSON Lines manifest, one patient per line:
/// `{"patient_id": str, "gcs": int, "gos": int, "slices": [paths]}`.
pub fn load_manifest(path: &Path) -> Result<Vec<PatientRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<PatientRecord>> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: PatientRecord = serde_json::from_str(raw)
            .map_err(|e| Error::Manifest { line, msg: e.to_string() })?;
        validate(&rec, line)?;
        if !seen.insert(rec.patient_id.clone()) {
            return Err(Error::Manifest {
                line,
                msg: format!("duplicate patient_id {}", rec.patient_id),
            });
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let mut text = String::new();
    for rec in records {
        text.push_str(&serde_json::to_string(rec)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Binarize a GOS score with the given favorable threshold (default 4, so
/// {4, 5} → favorable).
pub fn binarize_gos_with(gos: u8, threshold: u8) -> Result<u8> {
    if !(GOS_MIN..=GOS_MAX).contains(&gos) {
        return Err(Error::Invalid(format!("gos {gos} outside [1, 5]")));
    }
    Ok(u8::from(gos >= threshold))
}

pub fn binarize_gos(gos: u8) -> Result<u8> {
    binarize_gos_with(gos, DEFAULT_FAVORABLE_GOS)
}

/// Shuffle patients with the seed and cut at round(N·fraction). Both folds
/// must contain both labels; failing draws re-shuffle with follow-on streams
/// up to 100 times before giving up.
pub fn split_patients(
    cohort: &[PatientRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Split(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    if cohort.len() < 2 {
        return Err(Error::Split(format!("cohort of {} patients cannot be split", cohort.len())));
    }
    let labels: Vec<u8> = cohort
        .iter()
        .map(|p| binarize_gos(p.gos))
        .collect::<Result<_>>()?;
    if labels.iter().all(|&l| l == 1) || labels.iter().all(|&l| l == 0) {
        return Err(Error::Split("cohort contains a single label".into()));
    }

    let n = cohort.len();
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);

    for attempt in 0..100u64 {
        let mut order: Vec<usize> = (0..n).collect();
        let mut stream = RngStream::new(seed, "patient-split").derive(&format!("attempt{attempt}"));
        shuffle(&mut order, &mut stream);
        let (train_idx, test_idx) = order.split_at(n_train);
        let has_both = |idx: &[usize]| {
            idx.iter().any(|&i| labels[i] == 1) && idx.iter().any(|&i| labels[i] == 0)
        };
        if has_both(train_idx) && has_both(test_idx) {
            return Ok(SplitPlan {
                seed,
                train: train_idx.iter().map(|&i| cohort[i].patient_id.clone()).collect(),
                test: test_idx.iter().map(|&i| cohort[i].patient_id.clone()).collect(),
            });
        }
    }
    Err(Error::Split(
        "no draw with both labels in both folds after 100 attempts".into(),
    ))
}

pub fn write_split(path: &Path, plan: &SplitPlan) -> Result<()> {
    let text = serde_json::to_string_pretty(plan)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<SplitPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn slices_of(patient: &PatientRecord) -> Result<Vec<SliceRecord>> {
    let label = binarize_gos(patient.gos)?;
    Ok(patient
        .slices
        .iter()
        .map(|p| SliceRecord {
            patient_id: patient.patient_id.clone(),
            slice_path: p.clone(),
            gcs: patient.gcs,
            label,
        })
        .collect())
}

/// Expand a split plan into per-fold slice lists. When `root` is given,
/// every slice path (resolved against it if relative) must exist on disk.
pub fn expand_slices(
    plan: &SplitPlan,
    cohort: &[PatientRecord],
    root: Option<&Path>,
) -> Result<(Vec<SliceRecord>, Vec<SliceRecord>)> {
    let by_id: std::collections::BTreeMap<&str, &PatientRecord> =
        cohort.iter().map(|p| (p.patient_id.as_str(), p)).collect();

    let mut expand = |ids: &[String]| -> Result<Vec<SliceRecord>> {
        let mut out = Vec::new();
        for id in ids {
            let patient = by_id.get(id.as_str()).ok_or_else(|| {
                Error::Split(format!("split references unknown patient {id}"))
            })?;
            let mut slices = slices_of(patient)?;
            if let Some(root) = root {
                for s in &slices {
                    let full = if s.slice_path.is_absolute() {
                        s.slice_path.clone()
                    } else {
                        root.join(&s.slice_path)
                    };
                    if !full.exists() {
                        return Err(Error::Invalid(format!(
                            "slice file missing on disk: {}",
                            full.display()
                        )));
                    }
                }
            }
            out.append(&mut slices);
        }
        Ok(out)
    };

    let train = expand(&plan.train)?;
    let test = expand(&plan.test)?;
    Ok((train, test))
}
