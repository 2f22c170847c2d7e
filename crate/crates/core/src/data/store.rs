//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/cores/<core_id>/frame.bin     RF samples [rows, cols]
//! <root>/cores/<core_id>/mask.bin      prostate mask as 0/1 [rows, cols]
//! <root>/cores/<core_id>/meta.json     labels, geometry, extraction parameters
//! <root>/cores/<core_id>/roi_NN.bin    optional preprocessed ROIs [256, 256]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::roi::{extract_patches, RoiParams};
use super::types::{BiopsyCore, CancerSpan, Dataset, Matrix, NeedleGeometry, ProstateMask, RfFrame};
use crate::error::{Error, Result};
use crate::tensor_io::TensorFile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreMeta {
    pub core_id: String,
    pub patient_id: String,
    pub center_id: u32,
    pub label: u8,
    pub involvement: f64,
    pub needle: NeedleGeometry,
    pub axial_spacing: f64,
    pub lateral_spacing: f64,
    pub probe_origin: (f64, f64),
    pub frame_shape: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cancer_span: Option<CancerSpan>,
    pub extraction: RoiParams,
}

impl CoreMeta {
    pub fn of(core: &BiopsyCore, extraction: &RoiParams) -> Self {
        Self {
            core_id: core.core_id.clone(),
            patient_id: core.patient_id.clone(),
            center_id: core.center_id,
            label: core.label,
            involvement: core.involvement,
            needle: core.needle,
            axial_spacing: core.frame.axial_spacing(),
            lateral_spacing: core.frame.lateral_spacing(),
            probe_origin: core.frame.probe_origin(),
            frame_shape: core.frame.shape(),
            cancer_span: core.cancer_span,
            extraction: *extraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub extraction: RoiParams,
    pub cores: Vec<CoreMeta>,
}

fn core_dir(root: &Path, core_id: &str) -> PathBuf {
    root.join("cores").join(core_id)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes one core; returns the files written.
pub fn write_core(
    root: &Path,
    core: &BiopsyCore,
    extraction: &RoiParams,
    write_rois: bool,
) -> Result<Vec<PathBuf>> {
    let dir = core_dir(root, &core.core_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (rows, cols) = core.frame.shape();
    let mut written = Vec::new();

    let frame_path = dir.join("frame.bin");
    TensorFile::new(vec![rows, cols], core.frame.samples().as_slice().to_vec())?
        .write(&frame_path)?;
    written.push(frame_path);

    let mask_path = dir.join("mask.bin");
    let mask: Vec<f32> = core.mask.as_slice().iter().map(|&b| b as u8 as f32).collect();
    TensorFile::new(vec![rows, cols], mask)?.write(&mask_path)?;
    written.push(mask_path);

    let meta_path = dir.join("meta.json");
    write_json(&meta_path, &CoreMeta::of(core, extraction))?;
    written.push(meta_path);

    if write_rois {
        for patch in extract_patches(core, extraction)? {
            let p = dir.join(format!("roi_{:02}.bin", patch.index_along_needle));
            let (h, w) = patch.pixels.shape();
            TensorFile::new(vec![h, w], patch.pixels.into_vec())?.write(&p)?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn write_dataset(
    root: &Path,
    dataset: &Dataset,
    extraction: &RoiParams,
    write_rois: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut written = Vec::new();
    for core in &dataset.cores {
        written.extend(write_core(root, core, extraction, write_rois)?);
    }
    let manifest = DatasetManifest {
        extraction: *extraction,
        cores: dataset
            .cores
            .iter()
            .map(|c| CoreMeta::of(c, extraction))
            .collect(),
    };
    let path = root.join("manifest.json");
    write_json(&path, &manifest)?;
    written.push(path);
    Ok(written)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_core(root: &Path, core_id: &str) -> Result<BiopsyCore> {
    let dir = core_dir(root, core_id);
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CoreMeta = serde_json::from_str(&text)?;

    let read_2d = |name: &str| -> Result<TensorFile> {
        let path = dir.join(name);
        let t = TensorFile::read(&path)?;
        if t.shape != [meta.frame_shape.0, meta.frame_shape.1] {
            return Err(Error::TensorFile {
                path,
                reason: format!("shape {:?} does not match meta {:?}", t.shape, meta.frame_shape),
            });
        }
        Ok(t)
    };
    let (rows, cols) = meta.frame_shape;
    let frame = RfFrame::new(
        Matrix::new(rows, cols, read_2d("frame.bin")?.data)?,
        meta.axial_spacing,
        meta.lateral_spacing,
        meta.probe_origin,
    )?;
    let mask = ProstateMask::new(
        rows,
        cols,
        read_2d("mask.bin")?.data.iter().map(|&v| v > 0.5).collect(),
    )?;
    let core = BiopsyCore {
        core_id: meta.core_id,
        patient_id: meta.patient_id,
        center_id: meta.center_id,
        label: meta.label,
        involvement: meta.involvement,
        frame,
        needle: meta.needle,
        mask,
        cancer_span: meta.cancer_span,
    };
    core.validate()?;
    Ok(core)
}

pub fn load_dataset(root: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest = read_manifest(root)?;
    let cores = manifest
        .cores
        .iter()
        .map(|m| load_core(root, &m.core_id))
        .collect::<Result<Vec<_>>>()?;
    Ok((Dataset { cores }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    #[test]
    fn dataset_roundtrip_and_roi_files() {
        let cfg = SynthConfig {
            n_patients: 2,
            cores_per_patient: 1,
            cancer_core_rate: 0.5,
            seed: 11,
            ..Default::default()
        };
        let data = synth_generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let params = RoiParams::default();
        let written = write_dataset(dir.path(), &data, &params, true).unwrap();
        // per core: frame, mask, meta, 55 ROIs; plus the manifest
        assert_eq!(written.len(), 2 * (3 + 55) + 1);
        let (back, manifest) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        assert_eq!(manifest.cores.len(), 2);

        let roi = TensorFile::read(&dir.path().join("cores").join(&data.cores[0].core_id).join("roi_07.bin")).unwrap();
        let expect = &extract_patches(&data.cores[0], &params).unwrap()[7];
        assert_eq!(roi.shape, vec![256, 256]);
        assert_eq!(roi.data, expect.pixels.as_slice());
    }
}
