//! Analytical energy and latency model of the accelerator.
//!
//! Event counts come from walking the tile schedule of every matmul in a
//! ViT inference. Costs are linear in the counts: per-event energies for
//! the tuning, conversion, memory, and electronic components plus a fixed
//! per-inference control term (image ingest, scheduling), and per-event
//! latencies with conversion-throughput-limited readout (converters are
//! shared across arms, so conversion latency follows conversion counts).
//! Electro-optic drift compensation adds a fractional overhead on the
//! tuning component once every few iterations.
//!
//! The reference totals identify only a few cost directions, so the
//! calibration fits one scale per identifiable direction: coefficients
//! within the conversion cluster keep fixed engineering ratios, and a
//! prior-anchored nonnegative ridge resolves the remaining slack. The fit
//! runs once; its output ships as the calibrated defaults and
//! [`fit_coeffs`] reproduces it.

use serde::{Deserialize, Serialize};

use crate::optical::{build_schedule, cycles_and_conversions, CoreGeometry};
use crate::{Error, Result};

pub const COMPONENTS: [&str; 8] =
    ["tuning", "vcsel", "bpd", "adc", "dac", "memory", "electronic", "control"];

/// Relative energies within the conversion cluster (vcsel, bpd, adc, dac);
/// only their overall scale is identifiable from the reference totals.
const ENERGY_CONV_RATIO: [f64; 4] = [0.4, 0.2, 1.2, 0.4];
/// Relative per-conversion latencies within the cluster.
const LATENCY_CONV_RATIO: [f64; 4] = [2.0, 1.0, 6.0, 2.0];
/// Pinned per-tile-load programming latency (ps); kept small so the tuning
/// block stays below its 5% share of total delay.
const TILE_LOAD_PS: f64 = 1000.0;

/// Standard ViT encoder shapes at 224x224, patch 16.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViTShape {
    pub name: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_classes: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
}

impl ViTShape {
    pub fn tiny() -> Self {
        Self::standard("tiny", 192, 12, 3)
    }

    pub fn small() -> Self {
        Self::standard("small", 384, 12, 6)
    }

    pub fn base() -> Self {
        Self::standard("base", 768, 12, 12)
    }

    pub fn large() -> Self {
        Self::standard("large", 1024, 24, 16)
    }

    pub fn all_four() -> Vec<Self> {
        vec![Self::tiny(), Self::small(), Self::base(), Self::large()]
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            other => Err(Error::Param(format!("unknown ViT preset '{other}'"))),
        }
    }

    fn standard(name: &str, d: usize, layers: usize, heads: usize) -> Self {
        ViTShape {
            name: name.into(),
            d_model: d,
            n_layers: layers,
            n_heads: heads,
            d_ffn: 4 * d,
            n_classes: 1000,
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
        }
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every matmul of one inference as `(m, k, n, multiplicity)`.
    pub fn matmul_dims(&self) -> Vec<(usize, usize, usize, usize)> {
        let t = self.n_tokens();
        let d = self.d_model;
        let l = self.n_layers;
        vec![
            (self.n_patches(), self.patch_dim(), d, 1), // patch embed
            (t, d, d, 3 * l),                           // q/k/v projections
            (t, self.d_k(), t, self.n_heads * l),       // attention scores
            (t, t, self.d_k(), self.n_heads * l),       // attention-value products
            (t, d, d, l),                               // output projections
            (t, d, self.d_ffn, l),                      // ffn up
            (t, self.d_ffn, d, l),                      // ffn down
            (1, d, self.n_classes, 1),                  // classifier head
        ]
    }
}

/// Aggregated hardware event counts for one inference.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct WorkloadCounts {
    pub optical_cycles: u64,
    pub dac_ops: u64,
    pub adc_reads: u64,
    pub vcsel_activations: u64,
    pub bpd_reads: u64,
    /// MR pair programming events (weights loaded once per tile).
    pub tuning_ops: u64,
    /// Tile loads, the serialized unit of tuning latency.
    pub tile_loads: u64,
    /// Buffer traffic: input re-reads per column tile, partial-output
    /// writes per row tile, one load per weight element.
    pub memory_events: u64,
    /// Electronic work: partial-sum accumulations plus softmax, GELU,
    /// normalization, and residual element operations.
    pub electronic_events: u64,
}

/// Count every event of one ViT inference on the given core geometry.
pub fn workload_counts(shape: &ViTShape, geom: CoreGeometry) -> Result<WorkloadCounts> {
    let mut w = WorkloadCounts::default();
    for (m, k, n, mult) in shape.matmul_dims() {
        let schedule = build_schedule(m, k, n, geom)?;
        let c = cycles_and_conversions(&schedule, m);
        let mult = mult as u64;
        w.optical_cycles += c.optical_cycles * mult;
        w.dac_ops += c.dac_ops * mult;
        w.adc_reads += c.adc_reads * mult;
        w.vcsel_activations += c.vcsel_activations * mult;
        w.bpd_reads += c.bpd_reads * mult;
        w.tuning_ops += c.tuning_ops * mult;
        w.tile_loads += schedule.tiles.len() as u64 * mult;
        let (m64, k64, n64) = (m as u64, k as u64, n as u64);
        let (rt, ct) = (schedule.row_tiles as u64, schedule.col_tiles as u64);
        w.memory_events += (m64 * k64 * ct + m64 * n64 * rt + k64 * n64) * mult;
        w.electronic_events += (rt - 1) * m64 * n64 * mult;
    }
    let t = shape.n_tokens() as u64;
    let d = shape.d_model as u64;
    let l = shape.n_layers as u64;
    let heads = shape.n_heads as u64;
    // softmax + GELU + norms + residual additions
    w.electronic_events += l * heads * t * t;
    w.electronic_events += l * t * shape.d_ffn as u64;
    w.electronic_events += (2 * l + 1) * t * d;
    w.electronic_events += 2 * l * t * d;
    Ok(w)
}

/// Where the EO compensation overhead lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EoScope {
    /// Only the tuning component pays the overhead.
    TuningOnly,
    FullPipeline,
}

/// Per-event energies (picojoules) and per-unit latencies (picoseconds),
/// indexed like [`COMPONENTS`]. The control entry is per inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyCoeffs {
    pub energy_pj: [f64; 8],
    pub latency_ps: [f64; 8],
    pub eo_compensation_overhead: f64,
    pub eo_period_iters: usize,
    pub eo_scope: EoScope,
}

impl EnergyCoeffs {
    pub fn zeros() -> Self {
        EnergyCoeffs {
            energy_pj: [0.0; 8],
            latency_ps: [0.0; 8],
            eo_compensation_overhead: 0.20,
            eo_period_iters: 5,
            eo_scope: EoScope::TuningOnly,
        }
    }

    /// Defaults calibrated against the reference per-model totals; frozen
    /// output of [`fit_coeffs`] on the four standard shapes.
    pub fn calibrated() -> Self {
        EnergyCoeffs {
            energy_pj: CALIBRATED_ENERGY_PJ,
            latency_ps: CALIBRATED_LATENCY_PS,
            eo_compensation_overhead: 0.20,
            eo_period_iters: 5,
            eo_scope: EoScope::TuningOnly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.energy_pj.iter().chain(&self.latency_ps).any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Param("cost coefficients must be finite and >= 0".into()));
        }
        if !(self.eo_compensation_overhead >= 0.0) || self.eo_period_iters == 0 {
            return Err(Error::Param("EO overhead must be >= 0 with period >= 1".into()));
        }
        Ok(())
    }
}

/// Frozen output of [`fit_coeffs`] on the default geometry; regenerate with
/// the fit-coeffs command after changing counts or reference targets.
pub const CALIBRATED_ENERGY_PJ: [f64; 8] = [
    0.02006818558813063,
    0.2348898143703433,
    0.11744490718517164,
    0.7046694431110299,
    0.2348898143703433,
    0.02990800787250698,
    0.019528269519823626,
    17323929.38851232,
];
pub const CALIBRATED_LATENCY_PS: [f64; 8] = [
    1000.0,
    1.4310395787861667,
    0.7155197893930834,
    4.2931187363585,
    1.4310395787861667,
    0.04985092754728398,
    0.030004990275678208,
    5914574.399687525,
];

/// Energy event counts per component, in [`COMPONENTS`] order.
fn energy_counts(w: &WorkloadCounts) -> [f64; 8] {
    [
        w.tuning_ops as f64,
        w.vcsel_activations as f64,
        w.bpd_reads as f64,
        w.adc_reads as f64,
        w.dac_ops as f64,
        w.memory_events as f64,
        w.electronic_events as f64,
        1.0,
    ]
}

/// Latency counts per component: shared converters serialize readout, so
/// the conversion chain scales with conversion counts; tuning with tile
/// loads; control is per inference.
fn latency_counts(w: &WorkloadCounts) -> [f64; 8] {
    [
        w.tile_loads as f64,
        w.vcsel_activations as f64,
        w.bpd_reads as f64,
        w.adc_reads as f64,
        w.dac_ops as f64,
        w.memory_events as f64,
        w.electronic_events as f64,
        1.0,
    ]
}

/// One component's share of the totals.
#[derive(Debug, Clone, Serialize)]
pub struct CostLine {
    pub component: String,
    pub energy_events: f64,
    pub energy_pj: f64,
    pub latency_ps: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub lines: Vec<CostLine>,
    pub total_energy_pj: f64,
    pub total_latency_ps: f64,
}

impl CostReport {
    pub fn total_energy_uj(&self) -> f64 {
        self.total_energy_pj * 1e-6
    }

    pub fn total_latency_us(&self) -> f64 {
        self.total_latency_ps * 1e-6
    }

    pub fn energy_share(&self, component: &str) -> f64 {
        self.lines
            .iter()
            .find(|l| l.component == component)
            .map(|l| l.energy_pj / self.total_energy_pj)
            .unwrap_or(0.0)
    }

    pub fn latency_share(&self, component: &str) -> f64 {
        self.lines
            .iter()
            .find(|l| l.component == component)
            .map(|l| l.latency_ps / self.total_latency_ps)
            .unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,energy_events,energy_pj,latency_ps\n");
        for l in &self.lines {
            s.push_str(&format!(
                "{},{},{},{}\n",
                l.component, l.energy_events, l.energy_pj, l.latency_ps
            ));
        }
        s.push_str(&format!("total,,{},{}\n", self.total_energy_pj, self.total_latency_ps));
        s
    }
}

/// Per-component energy/latency breakdown with totals.
///
/// The EO compensation overhead multiplies the tuning line (or every line
/// under `FullPipeline`) by `overhead / period`.
pub fn cost_report(w: &WorkloadCounts, coeffs: &EnergyCoeffs) -> Result<CostReport> {
    coeffs.validate()?;
    let ec = energy_counts(w);
    let lc = latency_counts(w);
    let eo = coeffs.eo_compensation_overhead / coeffs.eo_period_iters as f64;
    let mut lines = Vec::with_capacity(8);
    let mut te = 0.0;
    let mut tl = 0.0;
    for (i, name) in COMPONENTS.iter().enumerate() {
        let scale = match coeffs.eo_scope {
            EoScope::TuningOnly if *name == "tuning" => 1.0 + eo,
            EoScope::TuningOnly => 1.0,
            EoScope::FullPipeline => 1.0 + eo,
        };
        let e = ec[i] * coeffs.energy_pj[i] * scale;
        let l = lc[i] * coeffs.latency_ps[i] * scale;
        te += e;
        tl += l;
        lines.push(CostLine {
            component: name.to_string(),
            energy_events: ec[i],
            energy_pj: e,
            latency_ps: l,
        });
    }
    Ok(CostReport { lines, total_energy_pj: te, total_latency_ps: tl })
}

/// Frames-per-joule identity: `KFPS/W = 1 / (1000 * energy_per_frame_J)`.
pub fn kfps_per_watt(latency_s: f64, energy_j: f64) -> Result<f64> {
    if !(latency_s > 0.0 && energy_j > 0.0) {
        return Err(Error::Param("kfps_per_watt needs positive latency and energy".into()));
    }
    let fps = 1.0 / latency_s;
    let watts = energy_j / latency_s;
    Ok(fps / 1000.0 / watts)
}

/// Reference totals and published comparison figures, stored verbatim and
/// never recomputed.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceTable {
    pub models: [&'static str; 4],
    pub siph_latency_us: [f64; 4],
    pub siph_energy_uj: [f64; 4],
    pub fpga_latency_us: [f64; 4],
    pub gpu_latency_us: [f64; 4],
    pub fpga_energy_uj: [f64; 4],
    pub gpu_energy_uj: [f64; 4],
    /// Printed latency multipliers vs SiPh.
    pub printed_latency_ratio_fpga: [f64; 4],
    pub printed_latency_ratio_gpu: [f64; 4],
    pub printed_energy_ratio_fpga: [f64; 4],
    pub printed_energy_ratio_gpu: [f64; 4],
    /// System efficiency figures (KFPS/W), rank-ordered best first.
    pub kfps_per_watt: Vec<(&'static str, f64)>,
}

impl ReferenceTable {
    pub fn new() -> Self {
        let ours = 100.4;
        ReferenceTable {
            models: ["tiny", "small", "base", "large"],
            siph_latency_us: [269.0, 963.0, 3670.0, 12800.0],
            siph_energy_uj: [61.4, 188.0, 637.0, 2150.0],
            fpga_latency_us: [27429.0, 108050.0, 428880.0, 151010.0],
            gpu_latency_us: [10528.0, 41472.0, 164610.0, 579620.0],
            fpga_energy_uj: [54.86, 216.1, 857.8, 3020.3],
            gpu_energy_uj: [263.19, 1036.8, 4115.3, 14490.0],
            printed_latency_ratio_fpga: [102.0, 112.2, 116.9, 11.8],
            printed_latency_ratio_gpu: [39.1, 43.1, 44.8, 45.3],
            printed_energy_ratio_fpga: [0.89, 1.15, 1.35, 1.40],
            printed_energy_ratio_gpu: [4.29, 5.51, 6.46, 6.74],
            kfps_per_watt: vec![
                ("lightator", ours * 1.6),
                ("this-work", ours),
                ("lightbulb", ours / 1.7),
                ("robin", ours / 2.2),
                ("hqnna", ours / 2.9),
                ("crosslight", ours / 9.3),
                ("holylight", ours / 30.4),
                ("vck190", 1.42),
                ("a100", 0.86),
            ],
        }
    }
}

impl Default for ReferenceTable {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub model: String,
    pub siph_latency_us: f64,
    pub fpga_latency_ratio: f64,
    pub gpu_latency_ratio: f64,
    pub siph_energy_uj: f64,
    pub fpga_energy_ratio: f64,
    pub gpu_energy_ratio: f64,
}

/// Reference latency/energy ratios against the FPGA and GPU columns.
pub fn compare_table() -> Vec<CompareRow> {
    let r = ReferenceTable::new();
    (0..4)
        .map(|i| CompareRow {
            model: r.models[i].to_string(),
            siph_latency_us: r.siph_latency_us[i],
            fpga_latency_ratio: r.fpga_latency_us[i] / r.siph_latency_us[i],
            gpu_latency_ratio: r.gpu_latency_us[i] / r.siph_latency_us[i],
            siph_energy_uj: r.siph_energy_uj[i],
            fpga_energy_ratio: r.fpga_energy_uj[i] / r.siph_energy_uj[i],
            gpu_energy_ratio: r.gpu_energy_uj[i] / r.siph_energy_uj[i],
        })
        .collect()
}

pub fn compare_table_text() -> String {
    let mut s = String::from(
        "model  siph_lat_us  fpga_lat_x  gpu_lat_x  siph_energy_uj  fpga_energy_x  gpu_energy_x\n",
    );
    for row in compare_table() {
        s.push_str(&format!(
            "{:<6} {:>11.1} {:>11.1} {:>10.1} {:>15.1} {:>14.2} {:>13.2}\n",
            row.model,
            row.siph_latency_us,
            row.fpga_latency_ratio,
            row.gpu_latency_ratio,
            row.siph_energy_uj,
            row.fpga_energy_ratio,
            row.gpu_energy_ratio,
        ));
    }
    s
}

/// Solve the small system `a x = b` by Gaussian elimination.
fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-30 {
            return Err(Error::Param("singular system in coefficient fit".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col][c] * x[c];
        }
        x[col] = acc / a[col][col];
    }
    Ok(x)
}

/// Prior-anchored nonnegative ridge on relative residuals: minimizes
/// `sum_m ((row_m . x - y_m)/y_m)^2 + mu sum_i ((x_i - p_i)/p_i)^2` with
/// `x >= 0` via an active-set sweep.
fn ridge_nnls(rows: &[Vec<f64>], targets: &[f64], prior: &[f64], mu: f64) -> Result<Vec<f64>> {
    let n = prior.len();
    let mut active = vec![true; n];
    loop {
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        for (row, y) in rows.iter().zip(targets) {
            for i in 0..n {
                for j in 0..n {
                    a[i][j] += row[i] * row[j] / (y * y);
                }
                b[i] += row[i] / y;
            }
        }
        for i in 0..n {
            a[i][i] += mu / (prior[i] * prior[i]);
            b[i] += mu / prior[i];
        }
        for i in 0..n {
            if !active[i] {
                for j in 0..n {
                    a[i][j] = 0.0;
                    a[j][i] = 0.0;
                }
                a[i][i] = 1.0;
                b[i] = 0.0;
            }
        }
        let x = solve_dense(&mut a, &mut b)?;
        if let Some(worst) = (0..n)
            .filter(|&i| active[i] && x[i] < 0.0)
            .min_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap())
        {
            active[worst] = false;
            continue;
        }
        return Ok(x);
    }
}

/// Calibrate per-event coefficients so the four standard shapes reproduce
/// the reference SiPh totals.
pub fn fit_coeffs(geom: CoreGeometry) -> Result<EnergyCoeffs> {
    let reference = ReferenceTable::new();
    let shapes = ViTShape::all_four();
    let counts: Vec<WorkloadCounts> =
        shapes.iter().map(|s| workload_counts(s, geom)).collect::<Result<_>>()?;

    // Energy: fit [tuning, conversion-cluster scale, memory, electronic,
    // control] with the cluster ratios pinned.
    let e_rows: Vec<Vec<f64>> = counts
        .iter()
        .map(|w| {
            let c = energy_counts(w);
            let cluster = ENERGY_CONV_RATIO[0] * c[1]
                + ENERGY_CONV_RATIO[1] * c[2]
                + ENERGY_CONV_RATIO[2] * c[3]
                + ENERGY_CONV_RATIO[3] * c[4];
            vec![c[0], cluster, c[5], c[6], 1.0]
        })
        .collect();
    let e_targets: Vec<f64> = reference.siph_energy_uj.iter().map(|v| v * 1e6).collect();
    let e_prior = [0.02, 1.0, 0.03, 0.02, 14.0e6];
    let ex = ridge_nnls(&e_rows, &e_targets, &e_prior, 1e-4)?;
    let energy_pj = [
        ex[0],
        ENERGY_CONV_RATIO[0] * ex[1],
        ENERGY_CONV_RATIO[1] * ex[1],
        ENERGY_CONV_RATIO[2] * ex[1],
        ENERGY_CONV_RATIO[3] * ex[1],
        ex[2],
        ex[3],
        ex[4],
    ];

    // Latency: tile-load time pinned; fit [cluster scale, memory,
    // electronic, control] on the remaining delay.
    let l_rows: Vec<Vec<f64>> = counts
        .iter()
        .map(|w| {
            let c = latency_counts(w);
            let cluster = LATENCY_CONV_RATIO[0] * c[1]
                + LATENCY_CONV_RATIO[1] * c[2]
                + LATENCY_CONV_RATIO[2] * c[3]
                + LATENCY_CONV_RATIO[3] * c[4];
            vec![cluster, c[5], c[6], 1.0]
        })
        .collect();
    let l_targets: Vec<f64> = counts
        .iter()
        .zip(&reference.siph_latency_us)
        .map(|(w, us)| us * 1e6 - w.tile_loads as f64 * TILE_LOAD_PS)
        .collect();
    let l_prior = [1.0, 0.05, 0.03, 8.0e6];
    let lx = ridge_nnls(&l_rows, &l_targets, &l_prior, 1e-4)?;
    let latency_ps = [
        TILE_LOAD_PS,
        LATENCY_CONV_RATIO[0] * lx[0],
        LATENCY_CONV_RATIO[1] * lx[0],
        LATENCY_CONV_RATIO[2] * lx[0],
        LATENCY_CONV_RATIO[3] * lx[0],
        lx[1],
        lx[2],
        lx[3],
    ];

    Ok(EnergyCoeffs {
        energy_pj,
        latency_ps,
        eo_compensation_overhead: 0.20,
        eo_period_iters: 5,
        eo_scope: EoScope::TuningOnly,
    })
}
