//! Closed-form bubble ratios and the per-step communication/memory cost model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::queue::ProcessingOrder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BubbleParams {
    pub devices: usize,
    pub steps: usize,
    pub blocks: usize,
    pub order: ProcessingOrder,
}

impl BubbleParams {
    pub fn new(devices: usize, steps: usize, blocks: usize, order: ProcessingOrder) -> Self {
        Self { devices, steps, blocks, order }
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 || self.steps == 0 || self.blocks == 0 {
            return Err(Error::config("N, T and Block_num must be at least 1"));
        }
        Ok(())
    }

    pub fn regime(&self) -> Regime {
        match self.order {
            _ if self.devices == 1 => Regime::SingleDevice,
            ProcessingOrder::Sequential => Regime::Sequential,
            ProcessingOrder::Reverse if self.devices <= self.blocks => Regime::Saturated,
            ProcessingOrder::Reverse => Regime::Unsaturated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    SingleDevice,
    /// Reverse order, `N <= Block_num`.
    Saturated,
    /// Reverse order, `N > Block_num`.
    Unsaturated,
    Sequential,
}

/// Bubble ratio as an exact fraction `bubble / (bubble + T·Block_num)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BubbleFraction {
    pub regime: Regime,
    /// Per-device idle slots.
    pub bubble: i128,
    /// Per-device busy slots, `T·Block_num`.
    pub busy: i128,
}

impl BubbleFraction {
    pub fn denominator(&self) -> i128 {
        self.bubble + self.busy
    }

    pub fn ratio(&self) -> f64 {
        self.bubble as f64 / self.denominator() as f64
    }
}

pub fn bubble_fraction(bp: &BubbleParams) -> Result<BubbleFraction> {
    bp.validate()?;
    let n = bp.devices as i128;
    let t = bp.steps as i128;
    let b = bp.blocks as i128;
    let regime = bp.regime();
    let bubble = match regime {
        Regime::SingleDevice => 0,
        Regime::Saturated => n * n - n - 1,
        Regime::Unsaturated => b * (n - t) + n * (t - 2) + 1,
        Regime::Sequential => n * n - 1,
    };
    if bubble < 0 {
        return Err(Error::Invariant(format!("negative bubble {bubble} for {bp:?}")));
    }
    Ok(BubbleFraction { regime, bubble, busy: t * b })
}

pub fn bubble_ratio(bp: &BubbleParams) -> Result<f64> {
    bubble_fraction(bp).map(|f| f.ratio())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    RingAttention,
    Ulysses,
    VideoInfinity,
    Fifo,
    Dualparal,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::RingAttention, Method::Ulysses, Method::VideoInfinity, Method::Fifo, Method::Dualparal];

    pub fn name(self) -> &'static str {
        match self {
            Method::RingAttention => "ring-attention",
            Method::Ulysses => "ulysses",
            Method::VideoInfinity => "video-infinity",
            Method::Fifo => "fifo",
            Method::Dualparal => "dualparal",
        }
    }

    /// Whether communication overlaps computation.
    pub fn overlaps(self) -> bool {
        matches!(self, Method::RingAttention | Method::Fifo | Method::Dualparal)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

/// Inputs to the cost model. Units are abstract scalars and memory units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub frames: usize,
    pub token_h: usize,
    pub token_w: usize,
    pub hidden: usize,
    pub channels: usize,
    /// Latent grid, used by FIFO which ships raw latents.
    pub latent_h: usize,
    pub latent_w: usize,
    pub layers: usize,
    pub devices: usize,
    pub num_b: usize,
    pub num_c: usize,
    pub model_mem: f64,
    pub kv_mem: f64,
    /// Use `2·(N-1)/N·p·h·L` for ring attention instead of `2·p·h·L`.
    #[serde(default)]
    pub ring_exact: bool,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            frames: 64,
            token_h: 4,
            token_w: 4,
            hidden: 8,
            channels: 4,
            latent_h: 4,
            latent_w: 4,
            layers: 4,
            devices: 4,
            num_b: 8,
            num_c: 8,
            model_mem: 1.0,
            kv_mem: 1.0,
            ring_exact: false,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(Error::config("N must be at least 1"));
        }
        if !self.num_c.is_multiple_of(2) {
            return Err(Error::config(format!("Num_C must be even, got {}", self.num_c)));
        }
        if !(self.model_mem >= 0.0 && self.kv_mem >= 0.0) {
            return Err(Error::config("memory units must be nonnegative"));
        }
        Ok(())
    }

    /// `p = F·H'·W'`.
    pub fn p(&self) -> f64 {
        (self.frames * self.token_h * self.token_w) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodCost {
    pub method: Method,
    pub comm_scalars: f64,
    pub comm_overlap: bool,
    pub model_mem: f64,
    pub kv_mem: f64,
}

pub fn method_cost(method: Method, cp: &CostParams) -> Result<MethodCost> {
    cp.validate()?;
    let n = cp.devices as f64;
    let h = cp.hidden as f64;
    let l = cp.layers as f64;
    let f = cp.frames as f64;
    let cells = (cp.token_h * cp.token_w) as f64;
    let num_b = cp.num_b as f64;
    let num_c = cp.num_c as f64;
    let kv = cp.kv_mem;
    let (comm, model_mem, kv_mem) = match method {
        Method::RingAttention => {
            let share = if cp.ring_exact { (n - 1.0) / n } else { 1.0 };
            (2.0 * share * cp.p() * h * l, cp.model_mem, f / n * kv)
        }
        Method::Ulysses => (4.0 / n * cp.p() * h * l, cp.model_mem, f / n * kv),
        Method::VideoInfinity => (2.0 * num_c * cells * h * l, cp.model_mem, (f / n + num_c) * kv),
        Method::Fifo => {
            let latent = (cp.latent_h * cp.latent_w * cp.channels) as f64;
            (2.0 * (num_b + num_c) * latent, cp.model_mem, (num_b + num_c) * kv)
        }
        Method::Dualparal => (2.0 * (num_b + num_c / 2.0) * cells * h, cp.model_mem / n, (num_b + num_c) * kv),
    };
    Ok(MethodCost { method, comm_scalars: comm, comm_overlap: method.overlaps(), model_mem, kv_mem })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Devices,
    Frames,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: usize,
    pub costs: Vec<MethodCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub base: CostParams,
    pub points: Vec<SweepPoint>,
    /// `(method, column)` pairs that must not increase along the axis.
    pub non_increasing: Vec<(Method, &'static str)>,
}

pub fn scaling_sweep(cp: &CostParams, methods: &[Method], axis: SweepAxis, values: &[usize]) -> Result<SweepReport> {
    if methods.is_empty() || values.is_empty() {
        return Err(Error::config("sweep needs at least one method and one value"));
    }
    let points = values
        .iter()
        .map(|&v| {
            let mut p = *cp;
            match axis {
                SweepAxis::Devices => p.devices = v,
                SweepAxis::Frames => p.frames = v,
            }
            let costs = methods.iter().map(|&m| method_cost(m, &p)).collect::<Result<_>>()?;
            Ok(SweepPoint { value: v, costs })
        })
        .collect::<Result<Vec<_>>>()?;
    let non_increasing = match axis {
        SweepAxis::Devices => methods
            .iter()
            .flat_map(|&m| {
                let mut cols = vec![];
                match m {
                    Method::Dualparal => cols.push((m, "model_mem")),
                    Method::Ulysses => cols.extend([(m, "comm_scalars"), (m, "kv_mem")]),
                    Method::RingAttention | Method::VideoInfinity => cols.push((m, "kv_mem")),
                    Method::Fifo => {}
                }
                cols
            })
            .collect(),
        SweepAxis::Frames => Vec::new(),
    };
    Ok(SweepReport { axis, base: *cp, points, non_increasing })
}

/// Bubble ratio at each `Block_num`, other parameters fixed.
pub fn bubble_sweep(
    devices: usize,
    steps: usize,
    order: ProcessingOrder,
    blocks: &[usize],
) -> Result<Vec<(usize, BubbleFraction)>> {
    blocks.iter().map(|&b| bubble_fraction(&BubbleParams::new(devices, steps, b, order)).map(|f| (b, f))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ProcessingOrder::{Reverse, Sequential};

    fn frac(n: usize, t: usize, b: usize, o: ProcessingOrder) -> (i128, i128) {
        let f = bubble_fraction(&BubbleParams::new(n, t, b, o)).unwrap();
        (f.bubble, f.denominator())
    }

    #[test]
    fn bubble_examples() {
        assert_eq!(frac(4, 50, 4, Reverse), (11, 211));
        assert_eq!(frac(4, 50, 4, Sequential), (15, 215));
        assert_eq!(frac(4, 50, 3, Reverse), (55, 205));
        assert_eq!(frac(1, 50, 3, Reverse), (0, 150));
        assert_eq!(frac(1, 7, 9, Sequential), (0, 63));
        assert!((bubble_ratio(&BubbleParams::new(4, 50, 4, Reverse)).unwrap() - 0.052_13).abs() < 1e-5);
    }

    #[test]
    fn regimes() {
        assert_eq!(BubbleParams::new(4, 50, 4, Reverse).regime(), Regime::Saturated);
        assert_eq!(BubbleParams::new(4, 50, 3, Reverse).regime(), Regime::Unsaturated);
        assert_eq!(BubbleParams::new(4, 50, 3, Sequential).regime(), Regime::Sequential);
        assert!(bubble_ratio(&BubbleParams::new(0, 50, 3, Reverse)).is_err());
    }

    #[test]
    fn dualparal_table_row() {
        let cp = CostParams { num_b: 8, num_c: 8, token_h: 4, token_w: 4, hidden: 8, ..Default::default() };
        let c = method_cost(Method::Dualparal, &cp).unwrap();
        assert_eq!(c.comm_scalars, 3072.0);
        assert_eq!(c.model_mem, cp.model_mem / 4.0);
        assert!(c.comm_overlap);
        assert_eq!(method_cost(Method::Fifo, &cp).unwrap().model_mem, cp.model_mem);
    }

    #[test]
    fn frame_scaling() {
        let cp = CostParams::default();
        let twice = CostParams { frames: cp.frames * 2, ..cp };
        let d = |m, p: &CostParams| method_cost(m, p).unwrap().kv_mem;
        assert_eq!(d(Method::Dualparal, &cp), d(Method::Dualparal, &twice));
        assert_eq!(2.0 * d(Method::RingAttention, &cp), d(Method::RingAttention, &twice));
    }

    #[test]
    fn ring_refinement() {
        let cp = CostParams { ring_exact: true, devices: 4, ..Default::default() };
        let exact = method_cost(Method::RingAttention, &cp).unwrap().comm_scalars;
        let plain = method_cost(Method::RingAttention, &CostParams { ring_exact: false, ..cp }).unwrap().comm_scalars;
        assert_eq!(exact, plain * 0.75);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!(matches!("pipefusion".parse::<Method>(), Err(Error::Config(_))));
    }

    #[test]
    fn sweeps() {
        let r = scaling_sweep(&CostParams::default(), &[Method::Dualparal], SweepAxis::Devices, &[1, 2, 4, 8]).unwrap();
        let mem: Vec<f64> = r.points.iter().map(|p| p.costs[0].model_mem).collect();
        assert_eq!(mem, vec![1.0, 0.5, 0.25, 0.125]);
        assert_eq!(r.non_increasing, vec![(Method::Dualparal, "model_mem")]);
        assert!(scaling_sweep(&CostParams::default(), &[], SweepAxis::Devices, &[1]).is_err());

        let b = bubble_sweep(8, 50, Reverse, &[4, 100, 1_000_000]).unwrap();
        assert!(b.windows(2).all(|w| w[1].1.ratio() < w[0].1.ratio()));
        assert!(b[2].1.ratio() < 1e-4);
    }
}
