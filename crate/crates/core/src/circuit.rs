//! Radial feeder model and the seeded prototype generator.
//!
//! All electrical quantities stored in a [`Circuit`] are per-unit. Node `0` is
//! the substation and carries no load; load nodes are `1..=n` and live at
//! `nodes[j - 1]`. Link `j` connects node `j` to node `j + 1`, so `links[0]`
//! leaves the substation.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default voltage half-band on squared per-unit voltage.
pub const DEFAULT_EPSILON: f64 = 0.05;

/// Per-unit bases: line-to-neutral voltage (V) and per-phase power (VA).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bases {
    pub v_base: f64,
    pub s_base: f64,
}

impl Default for Bases {
    fn default() -> Self {
        Self {
            v_base: 7200.0,
            s_base: 100_000.0,
        }
    }
}

impl Bases {
    pub fn z_base(&self) -> f64 {
        self.v_base * self.v_base / self.s_base
    }

    /// kW, kVAr or kVA to per-unit.
    pub fn kilo_to_pu(&self, value: f64) -> f64 {
        value * 1e3 / self.s_base
    }

    pub fn pu_to_kilo(&self, value: f64) -> f64 {
        value * self.s_base / 1e3
    }

    pub fn ohm_to_pu(&self, ohm: f64) -> f64 {
        ohm / self.z_base()
    }

    pub fn pu_to_ohm(&self, pu: f64) -> f64 {
        pu * self.z_base()
    }
}

/// Series impedance of one link, per-unit, with its physical length in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkImpedance {
    pub r: f64,
    pub x: f64,
    pub length: f64,
}

/// Consumption and PV generation at one load node, per-unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeLoad {
    pub p_c: f64,
    pub q_c: f64,
    pub p_g: f64,
    pub s: f64,
    pub has_pv: bool,
}

impl NodeLoad {
    pub fn consumer(p_c: f64, q_c: f64) -> Self {
        Self {
            p_c,
            q_c,
            p_g: 0.0,
            s: 0.0,
            has_pv: false,
        }
    }

    pub fn with_pv(p_c: f64, q_c: f64, p_g: f64, s: f64) -> Self {
        Self {
            p_c,
            q_c,
            p_g,
            s,
            has_pv: true,
        }
    }

    /// Net real power drawn from the feeder.
    pub fn net_p(&self) -> f64 {
        self.p_c - self.p_g
    }

    pub fn capacity_bound(&self) -> Result<f64> {
        capacity_bound(self)
    }
}

/// Reactive headroom of the inverter at a node: `sqrt(s^2 - p_g^2)`.
///
/// Nodes without PV have no headroom.
pub fn capacity_bound(load: &NodeLoad) -> Result<f64> {
    if !load.has_pv {
        return Ok(0.0);
    }
    if load.s < load.p_g {
        return Err(Error::CapacityBelowOutput {
            s: load.s,
            p_g: load.p_g,
        });
    }
    Ok(((load.s - load.p_g) * (load.s + load.p_g)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Circuit {
    pub nodes: Vec<NodeLoad>,
    pub links: Vec<LinkImpedance>,
    pub v0_squared: f64,
    pub bases: Bases,
}

impl Circuit {
    /// Number of load nodes (and of links).
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    /// Load at node `j` (1-based).
    pub fn node(&self, j: usize) -> &NodeLoad {
        &self.nodes[j - 1]
    }

    /// 1-based indices of nodes carrying PV.
    pub fn pv_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_pv)
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Reactive headroom per node, in node order.
    pub fn capacity_bounds(&self) -> Result<Vec<f64>> {
        self.nodes.iter().map(capacity_bound).collect()
    }

    /// Same feeder with every inverter resized to `s` (per-unit).
    pub fn with_capacity(&self, s: f64) -> Circuit {
        let mut out = self.clone();
        for node in out.nodes.iter_mut().filter(|l| l.has_pv) {
            node.s = s;
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Circuit> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Where a [`Violation`] was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Circuit,
    /// 1-based load node.
    Node(usize),
    /// 0-based link.
    Link(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    LinkCountMismatch,
    NonPositiveResistance,
    NonPositiveReactance,
    NonPositiveLength,
    NegativeConsumption,
    NegativeReactiveConsumption,
    NegativeGeneration,
    NegativeCapacity,
    CapacityBelowOutput,
    GenerationWithoutPv,
    SubstationVoltageOutOfBand,
    NonFinite,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = match self {
            Rule::LinkCountMismatch => "link count differs from node count",
            Rule::NonPositiveResistance => "resistance must be positive",
            Rule::NonPositiveReactance => "reactance must be positive",
            Rule::NonPositiveLength => "length must be positive",
            Rule::NegativeConsumption => "real consumption is negative",
            Rule::NegativeReactiveConsumption => "reactive consumption is negative",
            Rule::NegativeGeneration => "real generation is negative",
            Rule::NegativeCapacity => "inverter capacity is negative",
            Rule::CapacityBelowOutput => "capacity below real output",
            Rule::GenerationWithoutPv => "generation or capacity at a node without PV",
            Rule::SubstationVoltageOutOfBand => "substation voltage outside the regulation band",
            Rule::NonFinite => "value is not finite",
        };
        f.write_str(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub location: Location,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.location {
            Location::Circuit => write!(f, "circuit: {}", self.rule),
            Location::Node(j) => write!(f, "node {j}: {}", self.rule),
            Location::Link(j) => write!(f, "link {j}: {}", self.rule),
        }
    }
}

/// Checks every structural invariant; an empty list means the circuit is usable.
pub fn validate(circuit: &Circuit, epsilon: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |location, rule| out.push(Violation { location, rule });

    if circuit.links.len() != circuit.nodes.len() {
        push(Location::Circuit, Rule::LinkCountMismatch);
    }
    let v0 = circuit.v0_squared;
    if !v0.is_finite() {
        push(Location::Circuit, Rule::NonFinite);
    } else if v0 < 1.0 - epsilon || v0 > 1.0 + epsilon {
        push(Location::Circuit, Rule::SubstationVoltageOutOfBand);
    }

    for (k, link) in circuit.links.iter().enumerate() {
        let at = Location::Link(k);
        if ![link.r, link.x, link.length].iter().all(|v| v.is_finite()) {
            push(at, Rule::NonFinite);
            continue;
        }
        if link.r <= 0.0 {
            push(at, Rule::NonPositiveResistance);
        }
        if link.x <= 0.0 {
            push(at, Rule::NonPositiveReactance);
        }
        if link.length <= 0.0 {
            push(at, Rule::NonPositiveLength);
        }
    }

    for (i, load) in circuit.nodes.iter().enumerate() {
        let at = Location::Node(i + 1);
        if ![load.p_c, load.q_c, load.p_g, load.s]
            .iter()
            .all(|v| v.is_finite())
        {
            push(at, Rule::NonFinite);
            continue;
        }
        if load.p_c < 0.0 {
            push(at, Rule::NegativeConsumption);
        }
        if load.q_c < 0.0 {
            push(at, Rule::NegativeReactiveConsumption);
        }
        if load.p_g < 0.0 {
            push(at, Rule::NegativeGeneration);
        }
        if load.s < 0.0 {
            push(at, Rule::NegativeCapacity);
        }
        if load.has_pv {
            if load.s < load.p_g {
                push(at, Rule::CapacityBelowOutput);
            }
        } else if load.p_g != 0.0 || load.s != 0.0 {
            push(at, Rule::GenerationWithoutPv);
        }
    }
    out
}

/// Line impedance per kilometer, in ohms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpedancePerKm {
    pub r: f64,
    pub x: f64,
}

/// Knobs for drawing one feeder realization. Powers are in kW/kVAr/kVA,
/// distances in meters; conversion to per-unit happens in [`generate_circuit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    pub n: usize,
    pub spacing_range: [f64; 2],
    pub p_c_range: [f64; 2],
    pub q_c_factor_range: [f64; 2],
    pub p_g_value: f64,
    pub s_value: f64,
    pub penetration_r: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub impedance_per_km: ImpedancePerKm,
    pub v_base: f64,
    pub s_base: f64,
}

impl Default for ScenarioParams {
    /// The prototype rural feeder: 100 loads 200-300 m apart on a 7.2 kV line.
    fn default() -> Self {
        Self {
            n: 100,
            spacing_range: [200.0, 300.0],
            p_c_range: [0.0, 4.0],
            q_c_factor_range: [0.2, 0.3],
            p_g_value: 1.0,
            s_value: 1.1,
            penetration_r: 0.5,
            epsilon: DEFAULT_EPSILON,
            seed: 7,
            impedance_per_km: ImpedancePerKm { r: 0.33, x: 0.38 },
            v_base: 7200.0,
            s_base: 100_000.0,
        }
    }
}

fn check_range(field: &'static str, range: [f64; 2], min_positive: bool) -> Result<()> {
    let [lo, hi] = range;
    let bad = |reason: &str| {
        Err(Error::InvalidParam {
            field,
            reason: reason.to_string(),
        })
    };
    if !lo.is_finite() || !hi.is_finite() {
        return bad("bounds must be finite");
    }
    if lo > hi {
        return bad("lower bound exceeds upper bound");
    }
    if lo < 0.0 {
        return bad("bounds must be nonnegative");
    }
    if min_positive && lo <= 0.0 {
        return bad("bounds must be positive");
    }
    Ok(())
}

impl ScenarioParams {
    pub fn bases(&self) -> Bases {
        Bases {
            v_base: self.v_base,
            s_base: self.s_base,
        }
    }

    /// Number of PV nodes: `r * n` rounded half-to-even.
    pub fn pv_count(&self) -> usize {
        (self.penetration_r * self.n as f64).round_ties_even() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(Error::InvalidParam {
                field,
                reason: reason.to_string(),
            })
        };
        if self.n == 0 {
            return bad("n", "need at least one load node");
        }
        check_range("spacing_range", self.spacing_range, true)?;
        check_range("p_c_range", self.p_c_range, false)?;
        check_range("q_c_factor_range", self.q_c_factor_range, false)?;
        if !(self.p_g_value.is_finite() && self.p_g_value >= 0.0) {
            return bad("p_g_value", "must be finite and nonnegative");
        }
        if !(self.s_value.is_finite() && self.s_value >= 0.0) {
            return bad("s_value", "must be finite and nonnegative");
        }
        if self.s_value < self.p_g_value {
            return bad("s_value", "inverter capacity must be at least p_g_value");
        }
        if !(0.0..=1.0).contains(&self.penetration_r) {
            return bad("penetration_r", "must lie in [0, 1]");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon", "must lie in (0, 1)");
        }
        let z = self.impedance_per_km;
        if !(z.r.is_finite() && z.r > 0.0) {
            return bad("impedance_per_km.r", "must be positive");
        }
        if !(z.x.is_finite() && z.x > 0.0) {
            return bad("impedance_per_km.x", "must be positive");
        }
        if !(self.v_base.is_finite() && self.v_base > 0.0) {
            return bad("v_base", "must be positive");
        }
        if !(self.s_base.is_finite() && self.s_base > 0.0) {
            return bad("s_base", "must be positive");
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws one feeder realization.
///
/// The stream is ChaCha20 seeded with `params.seed` and consumed in a fixed order:
/// `n` spacings; then for each node in order, its real load followed by its
/// reactive factor; then `round(r n)` partial Fisher-Yates swaps choosing the PV
/// nodes. Every continuous draw is `lo + (hi - lo) * u` with `u` the 53-bit
/// uniform in `[0, 1)`. The inverter rating does not consume randomness, so
/// changing `s_value` keeps the rest of the realization fixed.
pub fn generate_circuit(params: &ScenarioParams) -> Result<Circuit> {
    params.validate()?;
    let n = params.n;
    let bases = params.bases();
    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);

    let links = (0..n)
        .map(|_| {
            let length = uniform(&mut rng, params.spacing_range);
            let km = length / 1000.0;
            LinkImpedance {
                r: bases.ohm_to_pu(km * params.impedance_per_km.r),
                x: bases.ohm_to_pu(km * params.impedance_per_km.x),
                length,
            }
        })
        .collect::<Vec<_>>();

    let mut nodes = (0..n)
        .map(|_| {
            let p_c = uniform(&mut rng, params.p_c_range);
            let factor = uniform(&mut rng, params.q_c_factor_range);
            NodeLoad::consumer(bases.kilo_to_pu(p_c), bases.kilo_to_pu(factor * p_c))
        })
        .collect::<Vec<_>>();

    let k = params.pv_count();
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let p_g = bases.kilo_to_pu(params.p_g_value);
    let s = bases.kilo_to_pu(params.s_value);
    for &i in &order[..k] {
        nodes[i].has_pv = true;
        nodes[i].p_g = p_g;
        nodes[i].s = s;
    }

    Ok(Circuit {
        nodes,
        links,
        v0_squared: 1.0,
        bases,
    })
}
