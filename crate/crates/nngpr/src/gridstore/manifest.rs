//! Ensemble manifests: a JSON file naming the member CGRID files and the
//! target series for one variable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::cgrid::read_grid_stack_tagged;
use super::{
    vectorize_ensemble, training_standardizer, EnsembleSnapshot, FieldSeries, GridError,
    Standardizer, TimeCode, TrainingSet,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMember {
    pub name: String,
    pub path: String,
}

/// On-disk manifest schema. Member and target paths are resolved relative to
/// the manifest file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub variable: String,
    pub units: String,
    pub members: Vec<ManifestMember>,
    pub target: String,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GridError::Io { path: path.display().to_string(), source: e })?;
        serde_json::from_str(&text).map_err(|e| GridError::Manifest(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| GridError::Manifest(e.to_string()))?;
        std::fs::write(path, text)
            .map_err(|e| GridError::Io { path: path.display().to_string(), source: e })
    }
}

/// A loaded ensemble: all member series plus the target series.
#[derive(Debug, Clone)]
pub struct EnsembleData {
    pub variable: String,
    pub units: String,
    pub member_names: Vec<String>,
    pub members: Vec<FieldSeries>,
    pub target: FieldSeries,
}

impl EnsembleData {
    /// Load every series referenced by a manifest file.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self, GridError> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        if manifest.members.is_empty() {
            return Err(GridError::Manifest("manifest lists no members".into()));
        }
        let resolve = |p: &str| -> PathBuf {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                base.join(pb)
            }
        };
        let mut members = Vec::with_capacity(manifest.members.len());
        let mut member_names = Vec::with_capacity(manifest.members.len());
        for m in &manifest.members {
            members.push(read_grid_stack_tagged(
                resolve(&m.path),
                &manifest.units,
                &manifest.variable,
            )?);
            member_names.push(m.name.clone());
        }
        let target =
            read_grid_stack_tagged(resolve(&manifest.target), &manifest.units, &manifest.variable)?;
        Ok(Self {
            variable: manifest.variable,
            units: manifest.units,
            member_names,
            members,
            target,
        })
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    /// An ensemble with one member promoted to target, for perfect-model
    /// runs. Member order among the remaining members is preserved.
    pub fn hold_out(&self, held_out: usize) -> Result<EnsembleData, GridError> {
        if held_out >= self.members.len() {
            return Err(GridError::Manifest(format!(
                "held-out index {held_out} out of range for {} members",
                self.members.len()
            )));
        }
        let mut members = Vec::new();
        let mut member_names = Vec::new();
        for (i, (s, name)) in self.members.iter().zip(&self.member_names).enumerate() {
            if i != held_out {
                members.push(s.clone());
                member_names.push(name.clone());
            }
        }
        Ok(EnsembleData {
            variable: self.variable.clone(),
            units: self.units.clone(),
            member_names,
            members,
            target: self.members[held_out].clone(),
        })
    }

    /// Training-period standardizers, one per member.
    pub fn standardizers(
        &self,
        start: TimeCode,
        end: TimeCode,
    ) -> Result<Vec<Standardizer>, GridError> {
        self.members
            .iter()
            .map(|m| training_standardizer(&m.slice_range(start, end)))
            .collect()
    }

    /// Snapshots for every target time in [start, end]. Every member must
    /// cover exactly those times.
    pub fn snapshots(
        &self,
        start: TimeCode,
        end: TimeCode,
        standardizers: &[Standardizer],
    ) -> Result<Vec<EnsembleSnapshot>, GridError> {
        let times: Vec<TimeCode> = self
            .target
            .times
            .iter()
            .copied()
            .filter(|&t| t >= start && t <= end)
            .collect();
        if times.is_empty() {
            return Err(GridError::TimeAxis(format!(
                "no target times in range {start}..{end}"
            )));
        }
        let mut snaps = Vec::with_capacity(times.len());
        for &t in &times {
            let mut fields = Vec::with_capacity(self.members.len());
            for (m, name) in self.members.iter().zip(&self.member_names) {
                let pos = m.position(t).ok_or_else(|| {
                    GridError::TimeAxis(format!("member {name} is missing time {t}"))
                })?;
                fields.push(m.field(pos));
            }
            snaps.push(vectorize_ensemble(t, fields, standardizers)?);
        }
        Ok(snaps)
    }

    /// Aligned training set over [start, end], with standardizers computed
    /// from that same range.
    pub fn training_set(&self, start: TimeCode, end: TimeCode) -> Result<TrainingSet, GridError> {
        let standardizers = self.standardizers(start, end)?;
        let snapshots = self.snapshots(start, end, &standardizers)?;
        let targets = self.target.slice_range(start, end);
        TrainingSet::new(snapshots, targets, standardizers, self.member_names.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridstore::{write_grid_stack, GridSpec};

    fn series(offset: f64, n_time: usize) -> FieldSeries {
        let spec = GridSpec::new(vec![-30.0, 30.0], vec![0.0, 120.0, 240.0]).unwrap();
        let times: Vec<TimeCode> = (0..n_time)
            .map(|i| TimeCode::new(2000 + (i / 12) as i32, (i % 12 + 1) as u8).unwrap())
            .collect();
        let frames: Vec<Vec<f64>> = (0..n_time)
            .map(|t| (0..6).map(|p| offset + t as f64 + 0.1 * p as f64).collect())
            .collect();
        FieldSeries::new(spec, times, frames, "K", "t2m").unwrap()
    }

    #[test]
    fn manifest_load_and_training_set() {
        let dir = tempfile::tempdir().unwrap();
        for (i, off) in [0.0, 5.0].iter().enumerate() {
            write_grid_stack(&series(*off, 24), dir.path().join(format!("m{i}.cgrid"))).unwrap();
        }
        write_grid_stack(&series(1.0, 24), dir.path().join("target.cgrid")).unwrap();
        let manifest = Manifest {
            variable: "t2m".into(),
            units: "K".into(),
            members: vec![
                ManifestMember { name: "a".into(), path: "m0.cgrid".into() },
                ManifestMember { name: "b".into(), path: "m1.cgrid".into() },
            ],
            target: "target.cgrid".into(),
        };
        let mpath = dir.path().join("manifest.json");
        manifest.write(&mpath).unwrap();

        let data = EnsembleData::load(&mpath).unwrap();
        assert_eq!(data.n_members(), 2);
        assert_eq!(data.units, "K");
        let ts = data
            .training_set(TimeCode::new(2000, 1).unwrap(), TimeCode::new(2000, 12).unwrap())
            .unwrap();
        assert_eq!(ts.n(), 12);
        assert_eq!(ts.d(), 6);
        assert_eq!(ts.d_in(), 12);
        assert_eq!(ts.member_names, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn hold_out_promotes_member_to_target() {
        let dir = tempfile::tempdir().unwrap();
        for (i, off) in [0.0, 5.0, 9.0].iter().enumerate() {
            write_grid_stack(&series(*off, 6), dir.path().join(format!("m{i}.cgrid"))).unwrap();
        }
        write_grid_stack(&series(1.0, 6), dir.path().join("target.cgrid")).unwrap();
        let manifest = Manifest {
            variable: "t2m".into(),
            units: "K".into(),
            members: vec![
                ManifestMember { name: "a".into(), path: "m0.cgrid".into() },
                ManifestMember { name: "b".into(), path: "m1.cgrid".into() },
                ManifestMember { name: "c".into(), path: "m2.cgrid".into() },
            ],
            target: "target.cgrid".into(),
        };
        let mpath = dir.path().join("manifest.json");
        manifest.write(&mpath).unwrap();
        let data = EnsembleData::load(&mpath).unwrap();
        let held = data.hold_out(1).unwrap();
        assert_eq!(held.member_names, vec!["a".to_string(), "c".to_string()]);
        assert_eq!(held.target.frames[0][0], 5.0);
        assert!(data.hold_out(3).is_err());
    }

    #[test]
    fn unknown_manifest_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("manifest.json");
        std::fs::write(
            &mpath,
            r#"{"variable":"x","units":"K","members":[],"target":"t","extra":1}"#,
        )
        .unwrap();
        assert!(matches!(Manifest::read(&mpath), Err(GridError::Manifest(_))));
    }
}
