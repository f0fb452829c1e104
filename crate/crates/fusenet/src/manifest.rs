//! Manifest CSV: `scan_id, patient_id, volume_path, mask_path,
//! pneumonia_atelectasis, mass, emphysema, nodules, normal` with 0/1 flags.
//! Paths are stored as written and resolved against the manifest directory.

use std::path::{Path, PathBuf};

use fusenet_core::evalkit::{DatasetManifest, DiseaseFlags, ScanRecord};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FILE_NAME: &str = "manifest.csv";

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    scan_id: String,
    patient_id: String,
    volume_path: String,
    mask_path: String,
    pneumonia_atelectasis: u8,
    mass: u8,
    emphysema: u8,
    nodules: u8,
    normal: u8,
}

fn flag(v: u8, column: &str, id: &str) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Config(format!("{id}: {column} must be 0 or 1"))),
    }
}

pub fn to_csv(manifest: &DatasetManifest) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &manifest.records {
        let f = r.labels;
        w.serialize(Row {
            scan_id: r.scan_id.clone(),
            patient_id: r.patient_id.clone(),
            volume_path: r.volume_path.clone(),
            mask_path: r.mask_path.clone().unwrap_or_default(),
            pneumonia_atelectasis: f.pneumonia_atelectasis as u8,
            mass: f.mass as u8,
            emphysema: f.emphysema as u8,
            nodules: f.nodules as u8,
            normal: f.normal() as u8,
        })?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

pub fn from_csv(bytes: &[u8]) -> Result<DatasetManifest> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut records = Vec::new();
    for row in r.deserialize() {
        let row: Row = row?;
        let id = row.scan_id.as_str();
        let labels = DiseaseFlags {
            pneumonia_atelectasis: flag(row.pneumonia_atelectasis, "pneumonia_atelectasis", id)?,
            mass: flag(row.mass, "mass", id)?,
            emphysema: flag(row.emphysema, "emphysema", id)?,
            nodules: flag(row.nodules, "nodules", id)?,
        };
        if flag(row.normal, "normal", id)? != labels.normal() {
            return Err(Error::Config(format!("{id}: normal flag contradicts the disease flags")));
        }
        records.push(ScanRecord {
            scan_id: row.scan_id,
            patient_id: row.patient_id,
            volume_path: row.volume_path,
            mask_path: (!row.mask_path.is_empty()).then_some(row.mask_path),
            labels,
        });
    }
    Ok(DatasetManifest::new(records)?)
}

/// Data directory holding `manifest.csv` and the volumes it lists.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl DataDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join(FILE_NAME);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { manifest: from_csv(&bytes)?, root })
    }

    pub fn save(root: &Path, manifest: &DatasetManifest) -> Result<()> {
        crate::vgr::write_bytes(&root.join(FILE_NAME), &to_csv(manifest)?)
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fusenet_core::evalkit::Disease;

    #[test]
    fn roundtrip_and_normal_column() {
        let m = DatasetManifest::new(vec![
            ScanRecord { scan_id: "a".into(), patient_id: "p".into(), volume_path: "v/a.vgr".into(), mask_path: None, labels: DiseaseFlags::default() },
            ScanRecord {
                scan_id: "b".into(),
                patient_id: "p".into(),
                volume_path: "v/b.vgr".into(),
                mask_path: Some("m/b.vgr".into()),
                labels: DiseaseFlags::with(&[Disease::Mass, Disease::Nodules]),
            },
        ])
        .unwrap();
        let csv = to_csv(&m).unwrap();
        let text = String::from_utf8(csv.clone()).unwrap();
        assert!(text.starts_with("scan_id,patient_id,volume_path,mask_path,pneumonia_atelectasis,mass,emphysema,nodules,normal\n"));
        assert!(text.contains("a,p,v/a.vgr,,0,0,0,0,1\n"));
        assert_eq!(from_csv(&csv).unwrap(), m);
        let bad = text.replace("a,p,v/a.vgr,,0,0,0,0,1", "a,p,v/a.vgr,,0,0,0,0,0");
        assert!(from_csv(bad.as_bytes()).is_err());
    }
}
