//! Activation statistics gathered over calibration samples: min/max ranges
//! for fixed-point parameters and per-channel absolute maxima for smoothing.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::formats::{compute_qparams, QParams, QuantSpec};
use crate::harness::model::{GptModel, Observer, Operand, Site};
use crate::nn::column_absmax;
use crate::tensor::{Mat, Rng};

/// Number of calibration sequences drawn from the calibration corpus.
pub const CALIBRATION_SAMPLES: usize = 128;

/// How observed values are grouped into ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupAxis {
    PerTensor,
    /// One range per index along `axis`.
    PerChannel {
        axis: usize,
    },
}

/// Running min/max per group.
#[derive(Clone, Debug, PartialEq)]
pub struct MinMaxStats {
    axis: GroupAxis,
    min: Vec<f64>,
    max: Vec<f64>,
    count: u64,
}

impl MinMaxStats {
    pub fn new(axis: GroupAxis) -> Self {
        MinMaxStats {
            axis,
            min: Vec::new(),
            max: Vec::new(),
            count: 0,
        }
    }

    pub fn axis(&self) -> GroupAxis {
        self.axis
    }

    /// Number of observations merged so far.
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    fn groups_for(&self, shape: &[usize]) -> Result<usize> {
        match self.axis {
            GroupAxis::PerTensor => Ok(1),
            GroupAxis::PerChannel { axis } => shape
                .get(axis)
                .copied()
                .ok_or_else(|| Error::shape(format!("channel axis {axis} out of range for shape {shape:?}"))),
        }
    }

    fn ensure_groups(&mut self, groups: usize) -> Result<()> {
        if self.min.is_empty() {
            self.min = vec![f64::INFINITY; groups];
            self.max = vec![f64::NEG_INFINITY; groups];
        } else if self.min.len() != groups {
            return Err(Error::shape(format!(
                "stats track {} channels, observation has {groups}",
                self.min.len()
            )));
        }
        Ok(())
    }

    /// Folds a tensor laid out as `shape` into the running ranges.
    pub fn observe(&mut self, data: &[f64], shape: &[usize]) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        let groups = self.groups_for(shape)?;
        self.ensure_groups(groups)?;
        let (stride, period) = match self.axis {
            GroupAxis::PerTensor => (1, 1),
            GroupAxis::PerChannel { axis } => (shape[axis + 1..].iter().product::<usize>(), groups),
        };
        for (i, &x) in data.iter().enumerate() {
            let g = (i / stride) % period;
            self.min[g] = self.min[g].min(x);
            self.max[g] = self.max[g].max(x);
        }
        self.count += 1;
        Ok(())
    }

    pub fn observe_mat(&mut self, x: &Mat) -> Result<()> {
        self.observe(x.data(), &[x.rows(), x.cols()])
    }

    pub fn merge(&mut self, other: &MinMaxStats) -> Result<()> {
        if self.axis != other.axis {
            return Err(Error::shape(format!(
                "cannot merge {:?} stats into {:?}",
                other.axis, self.axis
            )));
        }
        if other.count == 0 {
            return Ok(());
        }
        self.ensure_groups(other.min.len())?;
        for g in 0..self.min.len() {
            self.min[g] = self.min[g].min(other.min[g]);
            self.max[g] = self.max[g].max(other.max[g]);
        }
        self.count += other.count;
        Ok(())
    }

    /// `(min, max)` per group.
    pub fn ranges(&self) -> Result<Vec<(f64, f64)>> {
        if self.count == 0 {
            return Err(Error::Calibration("no observations".into()));
        }
        Ok(self.min.iter().copied().zip(self.max.iter().copied()).collect())
    }

    pub fn qparams(&self, spec: &QuantSpec) -> Result<QParams> {
        compute_qparams(&self.ranges()?, spec)
    }
}

/// Per-channel absolute maxima of a site's two operands. For linear sites
/// `act` is the input activation and `wgt` the weight's input channels; for
/// query-key sites they are the query and key channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAbsMax {
    pub act: Vec<f64>,
    pub wgt: Vec<f64>,
}

fn merge_max(into: &mut Vec<f64>, from: &[f64]) -> Result<()> {
    if into.is_empty() {
        into.extend_from_slice(from);
        return Ok(());
    }
    if into.len() != from.len() {
        return Err(Error::shape(format!(
            "{} channels merged with {}",
            into.len(),
            from.len()
        )));
    }
    into.iter_mut().zip(from).for_each(|(a, b)| *a = a.max(*b));
    Ok(())
}

impl ChannelAbsMax {
    pub fn merge(&mut self, other: &ChannelAbsMax) -> Result<()> {
        merge_max(&mut self.act, &other.act)?;
        merge_max(&mut self.wgt, &other.wgt)
    }
}

/// Records per-channel absmax of linear inputs and of query/key operands.
#[derive(Default)]
struct AbsMaxObserver {
    act: BTreeMap<Site, Vec<f64>>,
    rhs: BTreeMap<Site, Vec<f64>>,
    error: Option<Error>,
}

impl Observer for AbsMaxObserver {
    fn observe(&mut self, site: Site, operand: Operand, x: &Mat) {
        let target = match (site, operand) {
            (Site::Pv(_), _) => return,
            (Site::Qk(_), Operand::Rhs) => &mut self.rhs,
            (_, Operand::Lhs) => &mut self.act,
            _ => return,
        };
        let m = column_absmax(x);
        if let Err(e) = merge_max(target.entry(site).or_default(), &m) {
            self.error.get_or_insert(e);
        }
    }
}

/// Channel absmax of every linear input and query/key pair over all samples,
/// with the model running at whatever precision it is configured for.
pub fn collect_channel_absmax(
    model: &GptModel,
    samples: &[Vec<u32>],
    exec: Exec,
) -> Result<BTreeMap<Site, ChannelAbsMax>> {
    if samples.is_empty() {
        return Err(Error::Calibration("empty calibration sample set".into()));
    }
    let per_sample = exec.try_map(samples.len(), |i| {
        let mut obs = AbsMaxObserver::default();
        model.forward_with(&samples[i], &mut obs)?;
        match obs.error {
            Some(e) => Err(e),
            None => Ok(obs),
        }
    })?;
    let mut out: BTreeMap<Site, ChannelAbsMax> = BTreeMap::new();
    for obs in per_sample {
        for (site, act) in obs.act {
            let entry = out.entry(site).or_insert_with(|| ChannelAbsMax {
                act: Vec::new(),
                wgt: Vec::new(),
            });
            merge_max(&mut entry.act, &act)?;
        }
        for (site, k) in obs.rhs {
            if let Some(entry) = out.get_mut(&site) {
                merge_max(&mut entry.wgt, &k)?;
            }
        }
    }
    for (site, stats) in out.iter_mut() {
        if let Some(layer) = model.linear(*site) {
            stats.wgt = layer.input_channel_absmax();
        }
    }
    Ok(out)
}

/// Records min/max ranges for a chosen set of site operands.
pub struct MinMaxCollector {
    stats: BTreeMap<(Site, Operand), MinMaxStats>,
    error: Option<Error>,
}

impl MinMaxCollector {
    pub fn new(targets: impl IntoIterator<Item = ((Site, Operand), GroupAxis)>) -> Self {
        MinMaxCollector {
            stats: targets
                .into_iter()
                .map(|(k, axis)| (k, MinMaxStats::new(axis)))
                .collect(),
            error: None,
        }
    }

    pub fn merge(&mut self, other: &MinMaxCollector) -> Result<()> {
        for (k, s) in &other.stats {
            match self.stats.get_mut(k) {
                Some(mine) => mine.merge(s)?,
                None => {
                    self.stats.insert(*k, s.clone());
                }
            }
        }
        Ok(())
    }

    pub fn into_stats(self) -> Result<BTreeMap<(Site, Operand), MinMaxStats>> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.stats),
        }
    }
}

impl Observer for MinMaxCollector {
    fn observe(&mut self, site: Site, operand: Operand, x: &Mat) {
        if let Some(s) = self.stats.get_mut(&(site, operand)) {
            if let Err(e) = s.observe_mat(x) {
                self.error.get_or_insert(e);
            }
        }
    }
}

/// Min/max ranges of the requested operands over all samples.
pub fn collect_minmax(
    model: &GptModel,
    samples: &[Vec<u32>],
    targets: &[((Site, Operand), GroupAxis)],
    exec: Exec,
) -> Result<BTreeMap<(Site, Operand), MinMaxStats>> {
    if samples.is_empty() {
        return Err(Error::Calibration("empty calibration sample set".into()));
    }
    let per_sample = exec.try_map(samples.len(), |i| {
        let mut c = MinMaxCollector::new(targets.iter().copied());
        model.forward_with(&samples[i], &mut c)?;
        Ok::<_, Error>(c)
    })?;
    let mut total = MinMaxCollector::new(targets.iter().copied());
    for c in &per_sample {
        if let Some(e) = &c.error {
            return Err(Error::Calibration(e.to_string()));
        }
        total.merge(c)?;
    }
    total.into_stats()
}

/// `count` windows of up to `seq_len` tokens at random offsets.
pub fn draw_samples(tokens: &[u32], count: usize, seq_len: usize, rng: &mut Rng) -> Result<Vec<Vec<u32>>> {
    if tokens.is_empty() || seq_len == 0 {
        return Err(Error::Calibration("calibration corpus is empty".into()));
    }
    let len = seq_len.min(tokens.len());
    let starts = tokens.len() - len + 1;
    Ok((0..count)
        .map(|_| {
            let s = rng.below(starts);
            tokens[s..s + len].to_vec()
        })
        .collect())
}
