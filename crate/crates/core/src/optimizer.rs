//! Muon updates at full-matrix and head-group granularity, plus an AdamW-style
//! step for parameters that stay off the Muon path.

use crate::error::{Error, Result};
use crate::grouping::{build_groups, heads_to_rows, transfer_lr, HeadGrouping, RowPartition};
use crate::matcore::Whitening;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum Granularity {
    Full,
    /// Whitening per head group. The stored grouping is the one used by the
    /// most recent step (rebuilt every step when the rule resamples).
    Grouped(HeadGrouping),
}

/// Per-parameter Muon state. The momentum buffer always has the parameter's
/// full shape; groups are gathered from it at step time.
#[derive(Debug, Clone, PartialEq)]
pub struct MuonState<T> {
    pub momentum: Matrix<T>,
    pub momentum_coeff: f64,
    pub base_lr: f64,
    pub whitening: Whitening,
    pub granularity: Granularity,
    pub lr_transfer_enabled: bool,
    /// Whiten `g + μ·M` instead of `M`. Off by default.
    pub nesterov: bool,
}

impl<T: Scalar> MuonState<T> {
    pub fn new(shape: (usize, usize), momentum_coeff: f64, base_lr: f64, whitening: Whitening) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum_coeff) {
            return Err(Error::InvalidConfiguration(format!(
                "momentum_coeff must lie in [0, 1), got {momentum_coeff}"
            )));
        }
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return Err(Error::InvalidConfiguration(format!("base_lr must be positive, got {base_lr}")));
        }
        if let Whitening::NewtonSchulz(cfg) = &whitening {
            cfg.validate()?;
        }
        Ok(Self {
            momentum: Matrix::zeros(shape.0, shape.1),
            momentum_coeff,
            base_lr,
            whitening,
            granularity: Granularity::Full,
            lr_transfer_enabled: false,
            nesterov: false,
        })
    }

    pub fn with_grouping(mut self, grouping: HeadGrouping) -> Result<Self> {
        if self.momentum.rows() % grouping.num_heads() != 0 {
            return Err(Error::InvalidConfiguration(format!(
                "{} rows cannot be split into {} heads",
                self.momentum.rows(),
                grouping.num_heads()
            )));
        }
        self.granularity = Granularity::Grouped(grouping);
        Ok(self)
    }

    pub fn with_lr_transfer(mut self, enabled: bool) -> Self {
        self.lr_transfer_enabled = enabled;
        self
    }

    pub fn with_nesterov(mut self, enabled: bool) -> Self {
        self.nesterov = enabled;
        self
    }

    pub fn grouping(&self) -> Option<&HeadGrouping> {
        match &self.granularity {
            Granularity::Full => None,
            Granularity::Grouped(g) => Some(g),
        }
    }

    /// `M ← μM + G`; returns the direction to whiten.
    pub fn accumulate(&mut self, g: &Matrix<T>) -> Result<Matrix<T>> {
        if g.shape() != self.momentum.shape() {
            return Err(Error::InvalidInput(format!(
                "gradient shape {:?} does not match momentum {:?}",
                g.shape(),
                self.momentum.shape()
            )));
        }
        let mu = T::lit(self.momentum_coeff);
        for (m, &gi) in self.momentum.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *m = mu * *m + gi;
        }
        if self.nesterov {
            let mut d = g.clone();
            d.axpy(mu, &self.momentum)?;
            Ok(d)
        } else {
            Ok(self.momentum.clone())
        }
    }

    fn group_lr(&self, full: (usize, usize), group: (usize, usize)) -> T {
        if self.lr_transfer_enabled {
            T::lit(transfer_lr(self.base_lr, full, group))
        } else {
            T::lit(self.base_lr)
        }
    }
}

fn check_param(w: &Matrix<impl Scalar>, g: &Matrix<impl Scalar>) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(Error::InvalidInput(format!(
            "parameter {:?} and gradient {:?} shapes differ",
            w.shape(),
            g.shape()
        )));
    }
    g.ensure_finite()
}

/// Full-matrix Muon: `W − η·whiten(μM + G)`.
pub fn muon_step_full<T: Scalar>(w: &Matrix<T>, g: &Matrix<T>, state: &mut MuonState<T>) -> Result<Matrix<T>> {
    if state.granularity != Granularity::Full {
        return Err(Error::InvalidConfiguration("muon_step_full called on grouped state".into()));
    }
    check_param(w, g)?;
    let direction = state.accumulate(g)?;
    let o = state.whitening.apply(&direction)?;
    let lr = T::lit(state.base_lr);
    let mut out = w.clone();
    for (x, &oi) in out.as_mut_slice().iter_mut().zip(o.as_slice()) {
        *x = *x - lr * oi;
    }
    Ok(out)
}

/// Group Muon over head groups. The grouping is rebuilt for `step` when its
/// rule resamples.
pub fn group_muon_step<T: Scalar>(
    w: &Matrix<T>,
    g: &Matrix<T>,
    state: &mut MuonState<T>,
    step: u64,
) -> Result<Matrix<T>> {
    let Granularity::Grouped(current) = &state.granularity else {
        return Err(Error::InvalidConfiguration("group_muon_step needs a grouped state".into()));
    };
    check_param(w, g)?;
    let heads = current.num_heads();
    if w.rows() % heads != 0 {
        return Err(Error::InvalidConfiguration(format!(
            "{} rows cannot be split into {heads} heads",
            w.rows()
        )));
    }
    if current.rule().resamples() {
        let rebuilt = build_groups(heads, current.group_size(), current.rule(), step)?;
        state.granularity = Granularity::Grouped(rebuilt);
    }
    let Granularity::Grouped(grouping) = &state.granularity else { unreachable!() };
    let partition = heads_to_rows(grouping, w.rows() / heads);
    let direction = state.accumulate(g)?;
    apply_partitioned(w, &direction, &partition, state)
}

/// Group Muon over an arbitrary row partition, ignoring the state's head
/// grouping.
pub fn muon_step_partitioned<T: Scalar>(
    w: &Matrix<T>,
    g: &Matrix<T>,
    state: &mut MuonState<T>,
    partition: &RowPartition,
) -> Result<Matrix<T>> {
    check_param(w, g)?;
    if partition.num_rows() != w.rows() {
        return Err(Error::InvalidPartition(format!(
            "partition covers {} rows, parameter has {}",
            partition.num_rows(),
            w.rows()
        )));
    }
    let direction = state.accumulate(g)?;
    apply_partitioned(w, &direction, partition, state)
}

fn apply_partitioned<T: Scalar>(
    w: &Matrix<T>,
    direction: &Matrix<T>,
    partition: &RowPartition,
    state: &MuonState<T>,
) -> Result<Matrix<T>> {
    let mut out = w.clone();
    for (i, rows) in partition.groups().iter().enumerate() {
        let block = direction.select_rows(rows)?;
        let o = state
            .whitening
            .apply(&block)
            .map_err(|e| Error::GroupWhitening { group: i, source: Box::new(e) })?;
        let lr = state.group_lr(w.shape(), block.shape());
        for (k, &r) in rows.iter().enumerate() {
            for (x, &oi) in out.row_mut(r).iter_mut().zip(o.row(k)) {
                *x = *x - lr * oi;
            }
        }
    }
    Ok(out)
}

/// Whitens each row group of `m` independently and merges the results.
pub fn whiten_by_partition<T: Scalar>(
    m: &Matrix<T>,
    partition: &RowPartition,
    whitening: &Whitening,
) -> Result<Matrix<T>> {
    if partition.num_rows() != m.rows() {
        return Err(Error::InvalidPartition(format!(
            "partition covers {} rows, matrix has {}",
            partition.num_rows(),
            m.rows()
        )));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (i, rows) in partition.groups().iter().enumerate() {
        let o = whitening
            .apply(&m.select_rows(rows)?)
            .map_err(|e| Error::GroupWhitening { group: i, source: Box::new(e) })?;
        for (k, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(o.row(k));
        }
    }
    Ok(out)
}

/// Decoupled-weight-decay adaptive moments (AdamW).
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState<T> {
    pub first_moment: Matrix<T>,
    pub second_moment: Matrix<T>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
}

impl<T: Scalar> AdaptiveState<T> {
    pub fn new(shape: (usize, usize), beta1: f64, beta2: f64, weight_decay: f64) -> Result<Self> {
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfiguration(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidConfiguration(format!(
                "weight_decay must be nonnegative, got {weight_decay}"
            )));
        }
        Ok(Self {
            first_moment: Matrix::zeros(shape.0, shape.1),
            second_moment: Matrix::zeros(shape.0, shape.1),
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
        })
    }
}

pub fn adaptive_step<T: Scalar>(
    w: &Matrix<T>,
    g: &Matrix<T>,
    state: &mut AdaptiveState<T>,
    lr: f64,
) -> Result<Matrix<T>> {
    check_param(w, g)?;
    if g.shape() != state.first_moment.shape() {
        return Err(Error::InvalidInput(format!(
            "gradient shape {:?} does not match moments {:?}",
            g.shape(),
            state.first_moment.shape()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let one = T::one();
    let bias1 = one - b1.powi(t);
    let bias2 = one - b2.powi(t);
    let lr_t = T::lit(lr);
    let decay = one - lr_t * T::lit(state.weight_decay);
    let eps = T::lit(state.eps);

    let mut out = w.clone();
    let m = state.first_moment.as_mut_slice();
    let v = state.second_moment.as_mut_slice();
    for (i, x) in out.as_mut_slice().iter_mut().enumerate() {
        let gi = g.as_slice()[i];
        m[i] = b1 * m[i] + (one - b1) * gi;
        v[i] = b2 * v[i] + (one - b2) * gi * gi;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        *x = *x * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(out)
}
