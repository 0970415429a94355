//! Fit-state persistence: a JSON header with the scalar parameters followed
//! by little-endian f64 blocks for the training inputs, the trend-removed
//! targets, and the Cholesky factor.
//!
//! ```text
//! magic       4 bytes "NGF1"
//! header_len  u32
//! header      JSON, `header_len` bytes
//! x_vecs      f64 * n * d_in,  row-major
//! residuals   f64 * n * d,     row-major
//! chol        f64 * n * n,     row-major lower factor
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::gridstore::{GridSpec, Standardizer, TimeCode};
use crate::nngp::KernelParams;

use super::{FitState, GprError, ModelParams, TrendModel};

const MAGIC: [u8; 4] = *b"NGF1";
const SCHEMA: &str = "nngpr-fitstate-v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    sigma_w2: f64,
    sigma_b2: f64,
    depth: u32,
    noise_var: f64,
    beta: Vec<f64>,
    trend_intercept: bool,
    standardizers: Vec<Standardizer>,
    member_names: Vec<String>,
    member_dims: Vec<usize>,
    target_lats: Vec<f64>,
    target_lons: Vec<f64>,
    units: String,
    variable: String,
    time_codes: Vec<i32>,
    jitter: f64,
    n: usize,
    d: usize,
    d_in: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> GprError {
    GprError::Io { path: path.display().to_string(), source }
}

fn write_matrix_rows(
    w: &mut impl Write,
    m: &DMatrix<f64>,
    path: &Path,
) -> Result<(), GprError> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_f64::<LittleEndian>(m[(i, j)]).map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

fn read_matrix_rows(
    r: &mut impl Read,
    nrows: usize,
    ncols: usize,
    what: &str,
) -> Result<DMatrix<f64>, GprError> {
    let mut buf = vec![0.0f64; nrows * ncols];
    r.read_f64_into::<LittleEndian>(&mut buf)
        .map_err(|_| GprError::Serialization(format!("truncated {what} block")))?;
    Ok(DMatrix::from_row_iterator(nrows, ncols, buf))
}

/// Serialize a fit state. Byte output is deterministic for a given state.
pub fn save_fit_state(fit: &FitState, path: impl AsRef<Path>) -> Result<(), GprError> {
    let path = path.as_ref();
    let header = Header {
        schema: SCHEMA.into(),
        sigma_w2: fit.params.kernel.sigma_w2,
        sigma_b2: fit.params.kernel.sigma_b2,
        depth: fit.params.kernel.depth,
        noise_var: fit.params.noise_var,
        beta: fit.trend.coefficients().to_vec(),
        trend_intercept: fit.trend.has_intercept(),
        standardizers: fit.standardizers.clone(),
        member_names: fit.member_names.clone(),
        member_dims: fit.member_dims.clone(),
        target_lats: fit.target_spec.lats().to_vec(),
        target_lons: fit.target_spec.lons().to_vec(),
        units: fit.units.clone(),
        variable: fit.variable.clone(),
        time_codes: fit.times.iter().map(|t| t.code()).collect(),
        jitter: fit.jitter,
        n: fit.n(),
        d: fit.d(),
        d_in: fit.d_in(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| GprError::Serialization(e.to_string()))?;

    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC).map_err(|e| io_err(path, e))?;
    w.write_u32::<LittleEndian>(header_bytes.len() as u32).map_err(|e| io_err(path, e))?;
    w.write_all(&header_bytes).map_err(|e| io_err(path, e))?;
    for x in &fit.x_vecs {
        for &v in x {
            w.write_f64::<LittleEndian>(v).map_err(|e| io_err(path, e))?;
        }
    }
    write_matrix_rows(&mut w, &fit.residuals, path)?;
    write_matrix_rows(&mut w, &fit.chol_lower, path)?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Load a fit state written by [`save_fit_state`].
pub fn load_fit_state(path: impl AsRef<Path>) -> Result<FitState, GprError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| GprError::Serialization("file too short for magic".into()))?;
    if magic != MAGIC {
        return Err(GprError::Serialization(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let header_len = r
        .read_u32::<LittleEndian>()
        .map_err(|_| GprError::Serialization("truncated header length".into()))?;
    let mut header_bytes = vec![0u8; header_len as usize];
    r.read_exact(&mut header_bytes)
        .map_err(|_| GprError::Serialization("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| GprError::Serialization(e.to_string()))?;
    if header.schema != SCHEMA {
        return Err(GprError::Serialization(format!(
            "unsupported schema tag `{}`",
            header.schema
        )));
    }
    if header.member_dims.iter().sum::<usize>() != header.d_in {
        return Err(GprError::Serialization("member dims do not sum to d_in".into()));
    }

    let params = ModelParams::new(
        KernelParams::new(header.sigma_w2, header.sigma_b2, header.depth)?,
        header.noise_var,
    )?;
    let trend = TrendModel::new(header.beta, header.trend_intercept);
    let target_spec = GridSpec::new(header.target_lats, header.target_lons)?;
    let times: Result<Vec<TimeCode>, _> =
        header.time_codes.iter().map(|&c| TimeCode::from_code(c)).collect();

    let mut x_vecs = Vec::with_capacity(header.n);
    for _ in 0..header.n {
        let mut x = vec![0.0f64; header.d_in];
        r.read_f64_into::<LittleEndian>(&mut x)
            .map_err(|_| GprError::Serialization("truncated x_vecs block".into()))?;
        x_vecs.push(x);
    }
    let residuals = read_matrix_rows(&mut r, header.n, header.d, "residuals")?;
    let chol_lower = read_matrix_rows(&mut r, header.n, header.n, "cholesky")?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| io_err(path, e))? != 0 {
        return Err(GprError::Serialization("trailing bytes".into()));
    }

    Ok(FitState {
        params,
        trend,
        standardizers: header.standardizers,
        member_names: header.member_names,
        member_dims: header.member_dims,
        target_spec,
        units: header.units,
        variable: header.variable,
        times: times?,
        jitter: header.jitter,
        x_vecs,
        residuals,
        chol_lower,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpr::testutil::tiny_training_set;
    use crate::gpr::{predict, FitState};

    #[test]
    fn fit_state_round_trip_preserves_predictions_and_bytes() {
        let ts = tiny_training_set(61, 10, 2, 4);
        let params = ModelParams::new(KernelParams::new(1.5, 0.1, 3).unwrap(), 0.2).unwrap();
        let fs = FitState::assemble(&ts, params, true).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("fit.ngf");
        save_fit_state(&fs, &p1).unwrap();
        let back = load_fit_state(&p1).unwrap();

        assert_eq!(back.params, fs.params);
        assert_eq!(back.trend, fs.trend);
        assert_eq!(back.member_names, fs.member_names);
        assert_eq!(back.times, fs.times);

        let a = predict(&fs, &ts.snapshots[2]).unwrap();
        let b = predict(&back, &ts.snapshots[2]).unwrap();
        assert_eq!(a.latent_var.to_bits(), b.latent_var.to_bits());
        for (x, y) in a.mean_field.values.iter().zip(&b.mean_field.values) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        let p2 = dir.path().join("fit2.ngf");
        save_fit_state(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_magic_and_schema_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ngf");
        std::fs::write(&p, b"XXXX....").unwrap();
        assert!(matches!(load_fit_state(&p), Err(GprError::Serialization(_))));
    }
}
