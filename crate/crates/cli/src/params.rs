//! Parameter bundles: concatenated tensor records `M_x[0..g]`,
//! `M_y[0..g]`, then `phi` for SAPA-D, each stored as a rank-2 tensor.

use std::path::Path;

use sapa_core::{LinearMap, Real, SapaConfig, SapaParams, Tensor, Variant};

use crate::error::{CliError, CliResult};
use crate::tensorfile::{load_all, save_all, TensorFile};

fn map_record<T: Real>(m: &LinearMap<T>) -> TensorFile {
    let t = Tensor::new([1, 1, m.rows(), m.cols()], m.weights().to_vec()).expect("sizes match");
    TensorFile {
        dims: vec![m.rows(), m.cols()],
        ..TensorFile::from_tensor(&t)
    }
}

fn record_map<T: Real>(
    t: &TensorFile,
    rows: usize,
    cols: usize,
    what: &str,
) -> CliResult<LinearMap<T>> {
    if t.dims != [rows, cols] {
        return Err(CliError::usage(format!(
            "{what}: expected a {rows}x{cols} matrix, found dims {:?}",
            t.dims
        )));
    }
    Ok(LinearMap::new(rows, cols, t.to_tensor::<T>()?.into_data())?)
}

pub fn save<T: Real>(path: &Path, params: &SapaParams<T>) -> CliResult<()> {
    let records: Vec<TensorFile> = params
        .mx
        .iter()
        .chain(&params.my)
        .chain(&params.phi)
        .map(map_record)
        .collect();
    save_all(path, &records)
}

/// Loads and validates a bundle for `cfg` with `c` decoder and `ce`
/// encoder channels.
pub fn load<T: Real>(
    path: &Path,
    cfg: &SapaConfig,
    c: usize,
    ce: usize,
) -> CliResult<SapaParams<T>> {
    let records = load_all(path)?;
    let g = cfg.groups;
    let want = match cfg.variant {
        Variant::I => 0,
        Variant::B => 2 * g,
        Variant::D => 2 * g + 1,
    };
    if records.len() != want {
        return Err(CliError::usage(format!(
            "{}: {} expects {want} parameter tensors, found {}",
            path.display(),
            cfg.variant.name(),
            records.len()
        )));
    }
    let d = cfg.embed_dim;
    let mut mx = Vec::with_capacity(g);
    let mut my = Vec::with_capacity(g);
    for k in 0..g.min(records.len() / 2) {
        mx.push(record_map(&records[k], d, c, "M_x")?);
        my.push(record_map(&records[g + k], d, ce, "M_y")?);
    }
    let phi = match cfg.variant {
        Variant::D => Some(record_map(
            &records[2 * g],
            cfg.offset_channels(),
            c,
            "phi",
        )?),
        _ => None,
    };
    Ok(SapaParams { mx, my, phi })
}
