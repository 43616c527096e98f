//! Binary checkpoints of a fit in progress.
//!
//! Layout: the magic bytes `VSTMCKPT`, a u16 format version, then the model
//! spec, fit config, variational state, Adam moments, step index, RNG
//! position, epoch order and ELBO trace. Every number is little-endian;
//! arrays carry their shape in front of the row-major values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::inference::adam::AdamMoments;
use crate::inference::amortizer::{Dense, Mlp};
use crate::inference::fit::{FitConfig, FitSession};
use crate::inference::state::{GaussianBlock, GlobalBlocks, LocalFamily, VariationalState};
use crate::kernel::{RngState, RngStream};
use crate::model::ModelSpec;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VSTMCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

// Guards allocation on corrupt length fields.
const MAX_LEN: u64 = 1 << 34;

fn put_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    w.write_u64::<LE>(n as u64)?;
    Ok(())
}

fn get_len<R: Read>(r: &mut R) -> Result<usize> {
    let n = r.read_u64::<LE>()?;
    if n > MAX_LEN {
        return Err(Error::Format(format!("implausible length {n} in checkpoint")));
    }
    Ok(n as usize)
}

fn put_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    put_len(w, v.len())?;
    for &x in v {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

fn get_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = get_len(r)?;
    let mut v = vec![0.0; n];
    r.read_f64_into::<LE>(&mut v)?;
    Ok(v)
}

fn put_array2<W: Write>(w: &mut W, a: &Array2<f64>) -> Result<()> {
    put_len(w, a.nrows())?;
    put_len(w, a.ncols())?;
    for &x in a.iter() {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

fn get_array2<R: Read>(r: &mut R) -> Result<Array2<f64>> {
    let rows = get_len(r)?;
    let cols = get_len(r)?;
    let len = rows
        .checked_mul(cols)
        .filter(|&l| (l as u64) <= MAX_LEN)
        .ok_or_else(|| Error::Format("implausible array shape in checkpoint".into()))?;
    let mut v = vec![0.0; len];
    r.read_f64_into::<LE>(&mut v)?;
    Ok(Array2::from_shape_vec((rows, cols), v).expect("length matches shape"))
}

fn put_block<W: Write>(w: &mut W, b: &GaussianBlock) -> Result<()> {
    put_array2(w, &b.loc)?;
    put_array2(w, &b.log_scale)
}

fn get_block<R: Read>(r: &mut R) -> Result<GaussianBlock> {
    let loc = get_array2(r)?;
    let log_scale = get_array2(r)?;
    GaussianBlock::new(loc, log_scale).map_err(|e| Error::Format(e.to_string()))
}

fn put_state<W: Write>(w: &mut W, s: &VariationalState) -> Result<()> {
    for b in s.globals.blocks() {
        put_block(w, b)?;
    }
    match &s.local {
        LocalFamily::Explicit(b) => {
            w.write_u8(0)?;
            put_block(w, b)?;
        }
        LocalFamily::Amortized(mlp) => {
            w.write_u8(1)?;
            put_len(w, mlp.layers.len())?;
            for layer in &mlp.layers {
                put_array2(w, &layer.weight)?;
                put_f64s(w, layer.bias.as_slice().expect("standard layout"))?;
            }
        }
    }
    Ok(())
}

fn get_state<R: Read>(r: &mut R) -> Result<VariationalState> {
    let globals = GlobalBlocks {
        b: get_block(r)?,
        gamma: get_block(r)?,
        log_sigma: get_block(r)?,
        cpc: get_block(r)?,
    };
    let local = match r.read_u8()? {
        0 => LocalFamily::Explicit(get_block(r)?),
        1 => {
            let n = get_len(r)?;
            let mut layers = Vec::with_capacity(n.min(64));
            for _ in 0..n {
                let weight = get_array2(r)?;
                let bias = Array1::from(get_f64s(r)?);
                if bias.len() != weight.ncols() {
                    return Err(Error::Format("amortizer bias length mismatch".into()));
                }
                layers.push(Dense { weight, bias });
            }
            if layers.is_empty() {
                return Err(Error::Format("amortizer without layers".into()));
            }
            LocalFamily::Amortized(Mlp { layers })
        }
        tag => return Err(Error::Format(format!("unknown local family tag {tag}"))),
    };
    Ok(VariationalState { globals, local })
}

fn put_spec<W: Write>(w: &mut W, s: &ModelSpec) -> Result<()> {
    for n in [s.k, s.d, s.p] {
        put_len(w, n)?;
    }
    for x in [s.nu_gamma, s.sigma_gamma, s.nu_beta, s.sigma_beta_base, s.eta_theta] {
        w.write_f64::<LE>(x)?;
    }
    put_f64s(w, &s.sd_scale)
}

fn get_spec<R: Read>(r: &mut R) -> Result<ModelSpec> {
    let spec = ModelSpec {
        k: get_len(r)?,
        d: get_len(r)?,
        p: get_len(r)?,
        nu_gamma: r.read_f64::<LE>()?,
        sigma_gamma: r.read_f64::<LE>()?,
        nu_beta: r.read_f64::<LE>()?,
        sigma_beta_base: r.read_f64::<LE>()?,
        eta_theta: r.read_f64::<LE>()?,
        sd_scale: get_f64s(r)?,
    };
    spec.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(spec)
}

fn put_config<W: Write>(w: &mut W, c: &FitConfig) -> Result<()> {
    for n in [c.iterations, c.batch_size, c.mc_samples] {
        put_len(w, n)?;
    }
    for x in [c.learning_rate, c.beta1, c.beta2, c.adam_eps] {
        w.write_f64::<LE>(x)?;
    }
    w.write_u64::<LE>(c.seed)?;
    w.write_u8(c.amortized as u8)?;
    for n in [c.hidden_width, c.hidden_depth, c.elbo_eval_every] {
        put_len(w, n)?;
    }
    Ok(())
}

fn get_config<R: Read>(r: &mut R) -> Result<FitConfig> {
    Ok(FitConfig {
        iterations: get_len(r)?,
        batch_size: get_len(r)?,
        mc_samples: get_len(r)?,
        learning_rate: r.read_f64::<LE>()?,
        beta1: r.read_f64::<LE>()?,
        beta2: r.read_f64::<LE>()?,
        adam_eps: r.read_f64::<LE>()?,
        seed: r.read_u64::<LE>()?,
        amortized: r.read_u8()? != 0,
        hidden_width: get_len(r)?,
        hidden_depth: get_len(r)?,
        elbo_eval_every: get_len(r)?,
    })
}

/// Serializes a session to any writer.
pub fn write_checkpoint_to<W: Write>(w: &mut W, session: &FitSession) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u16::<LE>(CHECKPOINT_VERSION)?;
    put_spec(w, &session.spec)?;
    put_config(w, &session.config)?;
    put_state(w, &session.state)?;
    put_state(w, &session.moments.first)?;
    put_state(w, &session.moments.second)?;
    w.write_u64::<LE>(session.moments.step)?;
    put_len(w, session.moments.local_steps.len())?;
    for &s in &session.moments.local_steps {
        w.write_u64::<LE>(s)?;
    }
    put_len(w, session.step)?;
    let rng = session.rng.state();
    w.write_u64::<LE>(rng.seed)?;
    w.write_u64::<LE>(rng.stream)?;
    w.write_u128::<LE>(rng.word_pos)?;
    put_len(w, session.order.len())?;
    for &i in &session.order {
        put_len(w, i)?;
    }
    put_len(w, session.cursor)?;
    put_f64s(w, &session.trace)
}

/// Reads a session written by [`write_checkpoint_to`].
pub fn read_checkpoint_from<R: Read>(r: &mut R) -> Result<FitSession> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a checkpoint header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.read_u16::<LE>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let read = |r: &mut R| -> Result<FitSession> {
        let spec = get_spec(r)?;
        let config = get_config(r)?;
        let state = get_state(r)?;
        let first = get_state(r)?;
        let second = get_state(r)?;
        let adam_step = r.read_u64::<LE>()?;
        let n_local = get_len(r)?;
        let mut local_steps = vec![0u64; n_local];
        r.read_u64_into::<LE>(&mut local_steps)?;
        let step = get_len(r)?;
        let rng = RngStream::from_state(RngState {
            seed: r.read_u64::<LE>()?,
            stream: r.read_u64::<LE>()?,
            word_pos: r.read_u128::<LE>()?,
        });
        let n_order = get_len(r)?;
        let mut order = Vec::with_capacity(n_order);
        for _ in 0..n_order {
            order.push(get_len(r)?);
        }
        let cursor = get_len(r)?;
        let trace = get_f64s(r)?;
        let moments = AdamMoments {
            first,
            second,
            step: adam_step,
            local_steps,
        };
        Ok(FitSession::restore(
            spec, config, state, moments, step, rng, order, cursor, trace,
        ))
    };
    let session = read(r).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Format("truncated checkpoint".into())
        }
        other => other,
    })?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    if session.cursor > session.order.len() || session.order.iter().any(|&i| i >= session.order.len()) {
        return Err(Error::Format("inconsistent epoch order in checkpoint".into()));
    }
    Ok(session)
}

pub fn write_checkpoint(path: &Path, session: &FitSession) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint_to(&mut w, session)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<FitSession> {
    read_checkpoint_from(&mut BufReader::new(File::open(path)?))
}
