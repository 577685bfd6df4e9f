//! Bias-corrected Adam with one moment pair and step counter per parameter group.

use crate::error::{Error, Result};
use crate::scene::{append_rows, retain_rows, GaussianCloud, ParamGroup};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupMoments {
    pub width: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl GroupMoments {
    pub fn zeros(width: usize, n: usize) -> Self {
        Self {
            width,
            m: vec![0.0; width * n],
            v: vec![0.0; width * n],
            step: 0,
        }
    }
}

/// Adam state for every parameter group of a cloud. Rows follow the cloud
/// through densification and pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub groups: Vec<(ParamGroup, GroupMoments)>,
}

impl AdamState {
    pub fn new(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        let groups = ParamGroup::ALL
            .iter()
            .map(|&g| (g, GroupMoments::zeros(g.width(cloud.sh_degree()), n)))
            .collect();
        Self { groups }
    }

    pub fn group(&self, g: ParamGroup) -> &GroupMoments {
        &self.groups.iter().find(|(k, _)| *k == g).expect("all groups present").1
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut GroupMoments {
        &mut self.groups.iter_mut().find(|(k, _)| *k == g).expect("all groups present").1
    }

    /// Number of rows tracked.
    pub fn len(&self) -> usize {
        let g = &self.groups[0].1;
        g.m.len() / g.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn retain(&mut self, keep: &[bool]) {
        for (_, g) in &mut self.groups {
            retain_rows(&mut g.m, g.width, keep);
            retain_rows(&mut g.v, g.width, keep);
        }
    }

    /// Appends `count` rows of zero moments (new Gaussians start fresh).
    pub fn append_zero_rows(&mut self, count: usize) {
        for (_, g) in &mut self.groups {
            g.m.resize(g.m.len() + count * g.width, 0.0);
            g.v.resize(g.v.len() + count * g.width, 0.0);
        }
    }

    /// Appends copies of existing rows.
    pub fn append_copied_rows(&mut self, rows: &[usize]) {
        for (_, g) in &mut self.groups {
            append_rows(&mut g.m, g.width, rows);
            append_rows(&mut g.v, g.width, rows);
        }
    }

    /// Clears both moments of one group, e.g. after an opacity reset.
    pub fn reset_group(&mut self, group: ParamGroup) {
        let g = self.group_mut(group);
        g.m.iter_mut().for_each(|v| *v = 0.0);
        g.v.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(
    group: ParamGroup,
    params: &mut [f64],
    grads: &[f64],
    state: &mut GroupMoments,
    lr: f64,
) -> Result<()> {
    let lrs = vec![lr; state.width];
    adam_step_columns(group, params, grads, state, &lrs)
}

/// Adam update with a separate learning rate for each column of the group.
pub fn adam_step_columns(
    group: ParamGroup,
    params: &mut [f64],
    grads: &[f64],
    state: &mut GroupMoments,
    lrs: &[f64],
) -> Result<()> {
    if lrs.len() != state.width {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} learning rates for width {}",
            group.name(),
            lrs.len(),
            state.width
        )));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} params, {} grads, {} moment entries",
            group.name(),
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            index: k / state.width.max(1),
            field: group.name(),
        });
    }
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    let width = state.width;
    for (k, ((p, &g), (m, v))) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .enumerate()
    {
        let lr = lrs[k % width];
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}
