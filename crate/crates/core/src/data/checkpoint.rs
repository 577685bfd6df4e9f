//! Native checkpoint format: everything needed to resume a training run
//! bit-exactly.
//!
//! Layout (all integers and floats little-endian, floats as f64):
//!
//! ```text
//! magic "GSPRCKPT" | version u32
//! config            string (the `key = value` config text)
//! render settings   background[3], dilation, alpha_min, alpha_max, t_min, near_clip
//! iteration u64 | window_started u8 | scene_extent f64
//! prune event       u8 flag, then iteration u64, n_before u64, pruned u64
//! mask state        u8 flag, then kind string, target string, tau, ste_epsilon,
//!                   gate_prune, seed u64, active u8
//! cloud             sh_degree u32, n u64, then every column as an f64 vector
//! adam              group count u32, then per group: name string, width u32,
//!                   step u64, m vector, v vector
//! densify stats     grad_accum vector, count vector (u32)
//! history           row count u64, then per row: iter u64, loss, l1, ssim,
//!                   mask_l1, n_gaussians u64, prune_ratio, psnr flag u8 + f64
//! ```
//!
//! Vectors are a u64 length followed by the elements; strings are a u64 byte
//! length followed by UTF-8. Every random stream in training is keyed by the
//! run seed and the iteration number, so the iteration counter is the only
//! RNG position that needs storing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::masking::MaskState;
use crate::render::RenderSettings;
use crate::scene::{GaussianCloud, ParamGroup};
use crate::train::{AdamState, DensifyStats, GroupMoments, HistoryRow, PruneEvent, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GSPRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete resumable state of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub settings: RenderSettings,
    pub iteration: u64,
    pub window_started: bool,
    pub scene_extent: f64,
    pub prune_event: Option<PruneEvent>,
    pub mask: Option<MaskState>,
    pub cloud: GaussianCloud,
    pub adam: AdamState,
    pub densify: DensifyStats,
    pub history: Vec<HistoryRow>,
}

type Le = LittleEndian;

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u64::<Le>(s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn put_vec<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    w.write_u64::<Le>(v.len() as u64)?;
    for &x in v {
        w.write_f64::<Le>(x)?;
    }
    Ok(())
}

/// Guards length prefixes against absurd values from corrupt files.
fn get_len<R: Read>(r: &mut R) -> Result<usize> {
    let n = r.read_u64::<Le>()?;
    if n > (1 << 40) {
        return Err(ckpt_err(format!("implausible length {n}")));
    }
    Ok(n as usize)
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let n = get_len(r)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| ckpt_err("string is not UTF-8"))
}

fn get_vec<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = get_len(r)?;
    let mut v = vec![0.0; n];
    r.read_f64_into::<Le>(&mut v)?;
    Ok(v)
}

fn get_bool<R: Read>(r: &mut R) -> Result<bool> {
    match r.read_u8()? {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(ckpt_err(format!("invalid flag byte {b}"))),
    }
}

pub fn write_checkpoint<W: Write>(c: &Checkpoint, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<Le>(CHECKPOINT_VERSION)?;
    put_str(&mut w, &c.config.to_text())?;

    let s = &c.settings;
    for x in s.background {
        w.write_f64::<Le>(x)?;
    }
    for x in [s.dilation, s.alpha_min, s.alpha_max, s.t_min, s.near_clip] {
        w.write_f64::<Le>(x)?;
    }

    w.write_u64::<Le>(c.iteration)?;
    w.write_u8(c.window_started as u8)?;
    w.write_f64::<Le>(c.scene_extent)?;

    match &c.prune_event {
        Some(p) => {
            w.write_u8(1)?;
            w.write_u64::<Le>(p.iteration)?;
            w.write_u64::<Le>(p.n_before as u64)?;
            w.write_u64::<Le>(p.pruned as u64)?;
        }
        None => w.write_u8(0)?,
    }

    match &c.mask {
        Some(m) => {
            w.write_u8(1)?;
            put_str(&mut w, &m.kind.to_string())?;
            put_str(&mut w, &m.target.to_string())?;
            w.write_f64::<Le>(m.tau)?;
            w.write_f64::<Le>(m.ste_epsilon)?;
            w.write_f64::<Le>(m.gate_prune)?;
            w.write_u64::<Le>(m.seed)?;
            w.write_u8(m.active as u8)?;
        }
        None => w.write_u8(0)?,
    }

    let cl = &c.cloud;
    w.write_u32::<Le>(cl.sh_degree() as u32)?;
    w.write_u64::<Le>(cl.len() as u64)?;
    for col in [
        &cl.positions,
        &cl.log_scales,
        &cl.rotations,
        &cl.opacity_logits,
        &cl.sh_coeffs,
        &cl.mask_params,
        &cl.scores,
    ] {
        put_vec(&mut w, col)?;
    }

    w.write_u32::<Le>(c.adam.groups.len() as u32)?;
    for (group, g) in &c.adam.groups {
        put_str(&mut w, group.name())?;
        w.write_u32::<Le>(g.width as u32)?;
        w.write_u64::<Le>(g.step)?;
        put_vec(&mut w, &g.m)?;
        put_vec(&mut w, &g.v)?;
    }

    put_vec(&mut w, &c.densify.grad_accum)?;
    w.write_u64::<Le>(c.densify.count.len() as u64)?;
    for &k in &c.densify.count {
        w.write_u32::<Le>(k)?;
    }

    w.write_u64::<Le>(c.history.len() as u64)?;
    for h in &c.history {
        w.write_u64::<Le>(h.iter)?;
        for x in [h.loss, h.l1, h.ssim, h.mask_l1] {
            w.write_f64::<Le>(x)?;
        }
        w.write_u64::<Le>(h.n_gaussians as u64)?;
        w.write_f64::<Le>(h.prune_ratio)?;
        w.write_u8(h.psnr_holdout.is_some() as u8)?;
        w.write_f64::<Le>(h.psnr_holdout.unwrap_or(0.0))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| ckpt_err("file too short for the magic header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ckpt_err("bad magic bytes: not a checkpoint file"));
    }
    let version = r.read_u32::<Le>()?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!(
            "unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
        )));
    }
    read_body(&mut r).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => ckpt_err("truncated checkpoint"),
        other => other,
    })
}

fn read_body<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut config = TrainConfig::full();
    config.apply_text(&get_str(r)?)?;

    let mut f = || r.read_f64::<Le>();
    let background = [f()?, f()?, f()?];
    let settings = RenderSettings {
        background,
        dilation: f()?,
        alpha_min: f()?,
        alpha_max: f()?,
        t_min: f()?,
        near_clip: f()?,
    };

    let iteration = r.read_u64::<Le>()?;
    let window_started = get_bool(r)?;
    let scene_extent = r.read_f64::<Le>()?;

    let prune_event = if get_bool(r)? {
        Some(PruneEvent {
            iteration: r.read_u64::<Le>()?,
            n_before: r.read_u64::<Le>()? as usize,
            pruned: r.read_u64::<Le>()? as usize,
        })
    } else {
        None
    };

    let mask = if get_bool(r)? {
        let kind = get_str(r)?.parse()?;
        let target = get_str(r)?.parse()?;
        Some(MaskState {
            kind,
            target,
            tau: r.read_f64::<Le>()?,
            ste_epsilon: r.read_f64::<Le>()?,
            gate_prune: r.read_f64::<Le>()?,
            seed: r.read_u64::<Le>()?,
            active: get_bool(r)?,
        })
    } else {
        None
    };

    let sh_degree = r.read_u32::<Le>()? as usize;
    if sh_degree > crate::sh::MAX_DEGREE {
        return Err(ckpt_err(format!("SH degree {sh_degree} out of range")));
    }
    let n = get_len(r)?;
    let mut cloud = GaussianCloud::new(sh_degree);
    cloud.positions = get_vec(r)?;
    cloud.log_scales = get_vec(r)?;
    cloud.rotations = get_vec(r)?;
    cloud.opacity_logits = get_vec(r)?;
    cloud.sh_coeffs = get_vec(r)?;
    cloud.mask_params = get_vec(r)?;
    cloud.scores = get_vec(r)?;
    let widths = [
        (cloud.positions.len(), 3),
        (cloud.log_scales.len(), 3),
        (cloud.rotations.len(), 4),
        (cloud.opacity_logits.len(), 1),
        (cloud.sh_coeffs.len(), cloud.sh_width()),
        (cloud.mask_params.len(), 1),
        (cloud.scores.len(), 1),
    ];
    if widths.iter().any(|&(len, w)| len != n * w) {
        return Err(ckpt_err(format!("cloud columns inconsistent with {n} Gaussians")));
    }

    let groups_len = r.read_u32::<Le>()? as usize;
    let mut groups = Vec::with_capacity(groups_len);
    for _ in 0..groups_len {
        let name = get_str(r)?;
        let group = ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == name)
            .ok_or_else(|| ckpt_err(format!("unknown parameter group `{name}`")))?;
        let width = r.read_u32::<Le>()? as usize;
        let step = r.read_u64::<Le>()?;
        let m = get_vec(r)?;
        let v = get_vec(r)?;
        if width != group.width(sh_degree) || m.len() != n * width || v.len() != m.len() {
            return Err(ckpt_err(format!("optimizer state for `{name}` has the wrong shape")));
        }
        groups.push((group, GroupMoments { width, m, v, step }));
    }
    if groups.len() != ParamGroup::ALL.len() {
        return Err(ckpt_err("optimizer state is missing parameter groups"));
    }
    let adam = AdamState { groups };

    let grad_accum = get_vec(r)?;
    let count_len = get_len(r)?;
    let mut count = vec![0u32; count_len];
    r.read_u32_into::<Le>(&mut count)?;
    if grad_accum.len() != n || count.len() != n {
        return Err(ckpt_err("densification statistics have the wrong length"));
    }

    let rows = get_len(r)?;
    let mut history = Vec::with_capacity(rows.min(1 << 20));
    for _ in 0..rows {
        let iter = r.read_u64::<Le>()?;
        let loss = r.read_f64::<Le>()?;
        let l1 = r.read_f64::<Le>()?;
        let ssim = r.read_f64::<Le>()?;
        let mask_l1 = r.read_f64::<Le>()?;
        let n_gaussians = r.read_u64::<Le>()? as usize;
        let prune_ratio = r.read_f64::<Le>()?;
        let has_psnr = get_bool(r)?;
        let psnr = r.read_f64::<Le>()?;
        history.push(HistoryRow {
            iter,
            loss,
            l1,
            ssim,
            mask_l1,
            n_gaussians,
            prune_ratio,
            psnr_holdout: has_psnr.then_some(psnr),
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(ckpt_err("trailing bytes after checkpoint body"));
    }

    Ok(Checkpoint {
        config,
        settings,
        iteration,
        window_started,
        scene_extent,
        prune_event,
        mask,
        cloud,
        adam,
        densify: DensifyStats { grad_accum, count },
        history,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    write_checkpoint(c, File::create(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(File::open(path)?)
}
