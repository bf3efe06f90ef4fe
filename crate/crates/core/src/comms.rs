//! Analytical communication and latency model.
//!
//! Bit counts are exact rationals. Times are in seconds and use ring
//! collectives over a single shared bandwidth figure: an allgather of an
//! `S`-bit shard costs `(N−1)·S/B` plus `(N−1)` message latencies, an
//! allreduce of `V` bits costs `2(N−1)/N·V/B` plus `2(N−1)` latencies.
//! Compute time is a FLOP count times a per-FLOP cost.

use std::fmt::{self, Write as _};

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::vq::ceil_log2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommsConfig {
    /// Bits per transmitted activation value.
    pub precision_bits: u64,
    pub hidden: u64,
    pub layers: u64,
    pub tokens: u64,
    pub devices: u64,
    pub bandwidth_bps: f64,
    pub latency_s: f64,
    pub codebook_size: u64,
    pub groups: u64,
}

impl Default for CommsConfig {
    fn default() -> Self {
        CommsConfig {
            precision_bits: 32,
            hidden: 768,
            layers: 12,
            tokens: 1024,
            devices: 4,
            bandwidth_bps: 100e6,
            latency_s: 0.0,
            codebook_size: 1024,
            groups: 1,
        }
    }
}

impl CommsConfig {
    pub fn validate(&self) -> Result<()> {
        let ints = [
            self.precision_bits,
            self.hidden,
            self.layers,
            self.tokens,
            self.devices,
            self.codebook_size,
            self.groups,
        ];
        if ints.contains(&0) {
            return Err(Error::Precondition("comms config values must be positive".into()));
        }
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(Error::Precondition("bandwidth must be positive and finite".into()));
        }
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(Error::Precondition("latency must be non-negative".into()));
        }
        Ok(())
    }

    /// `G·⌈log₂K⌉`, bits for one token at one layer.
    pub fn index_bits(&self) -> u64 {
        self.groups * ceil_log2(self.codebook_size as usize) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Single,
    Astra,
    Tp,
    Sp,
    BpAg { nb: u64 },
    BpSp { nb: u64 },
}

impl Method {
    pub fn nb(&self) -> u64 {
        match self {
            Method::BpAg { nb } | Method::BpSp { nb } => *nb,
            _ => 0,
        }
    }

    pub fn validate(&self, layers: u64) -> Result<()> {
        match self {
            Method::BpAg { nb } | Method::BpSp { nb } if *nb == 0 || *nb > layers => Err(Error::Precondition(
                format!("Nb={nb} must lie in 1..={layers}"),
            )),
            _ => Ok(()),
        }
    }

    /// CSV label; ASTRA rows carry their group count.
    pub fn label(&self, groups: u64) -> String {
        match self {
            Method::Single => "single".into(),
            Method::Astra => format!("astra_g{groups}"),
            Method::Tp => "tp".into(),
            Method::Sp => "sp".into(),
            Method::BpAg { .. } => "bp_ag".into(),
            Method::BpSp { .. } => "bp_sp".into(),
        }
    }

    pub fn parse(label: &str, nb: u64) -> Result<Method> {
        Ok(match label {
            "single" => Method::Single,
            "astra" => Method::Astra,
            "tp" => Method::Tp,
            "sp" => Method::Sp,
            "bp_ag" => Method::BpAg { nb },
            "bp_sp" => Method::BpSp { nb },
            other => return Err(Error::Precondition(format!("unknown method {other:?}"))),
        })
    }
}

/// Knobs for the block-parallel baselines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BpCoefficients {
    /// Compute relative to an even `1/N` split.
    pub ag_compute: f64,
    pub sp_compute: f64,
    /// Allgathers per retained block for the sequence-parallel variant.
    pub sp_rounds: u64,
}

impl Default for BpCoefficients {
    fn default() -> Self {
        BpCoefficients {
            ag_compute: 1.25,
            sp_compute: 1.1,
            sp_rounds: 2,
        }
    }
}

/// Cost of one FLOP on one device.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeviceProfile {
    pub seconds_per_flop: f64,
}

/// Single-device ViT-Base forward time used to calibrate [`DeviceProfile`].
pub const DEFAULT_ANCHOR_S: f64 = 0.35;

impl DeviceProfile {
    /// Profile under which a single device runs `(layers, hidden, tokens)` in
    /// `seconds`.
    pub fn calibrated(seconds: f64, layers: u64, hidden: u64, tokens: u64) -> Self {
        DeviceProfile {
            seconds_per_flop: seconds / model_flops(layers, hidden, tokens),
        }
    }

    pub fn vit_base() -> Self {
        DeviceProfile::calibrated(DEFAULT_ANCHOR_S, 12, 768, 1024)
    }
}

/// Forward FLOPs of `layers` Transformer blocks over `tokens` tokens:
/// projections `8TD²`, scores and weighted sum `4T²D`, MLP (4× expansion)
/// `16TD²`.
pub fn model_flops(layers: u64, hidden: u64, tokens: u64) -> f64 {
    let (l, d, t) = (layers as f64, hidden as f64, tokens as f64);
    l * (24.0 * t * d * d + 4.0 * t * t * d)
}

pub fn bits_per_token(cfg: &CommsConfig, method: Method) -> Ratio<u64> {
    let full = cfg.hidden * cfg.precision_bits;
    Ratio::from_integer(match method {
        Method::Single => 0,
        Method::Astra => cfg.layers * cfg.index_bits(),
        Method::Sp => cfg.layers * full,
        Method::Tp => 4 * cfg.layers * full,
        Method::BpAg { nb } => nb * full,
        Method::BpSp { nb } => BpCoefficients::default().sp_rounds * nb * full,
    })
}

/// Bits per token with explicit block-parallel coefficients.
pub fn bits_per_token_with(cfg: &CommsConfig, method: Method, bp: &BpCoefficients) -> Ratio<u64> {
    match method {
        Method::BpSp { nb } => Ratio::from_integer(bp.sp_rounds * nb * cfg.hidden * cfg.precision_bits),
        m => bits_per_token(cfg, m),
    }
}

/// Full-precision over quantized volume, `D·r / (G·⌈log₂K⌉)`.
pub fn compression_ratio(cfg: &CommsConfig) -> Result<Ratio<u64>> {
    let q = cfg.index_bits();
    if q == 0 {
        return Err(Error::Precondition("a single-entry codebook sends no bits".into()));
    }
    Ok(bits_per_token(cfg, Method::Sp) / bits_per_token(cfg, Method::Astra))
}

fn allgather_time(cfg: &CommsConfig, shard_bits: f64) -> f64 {
    let steps = (cfg.devices - 1) as f64;
    steps * shard_bits / cfg.bandwidth_bps + steps * cfg.latency_s
}

fn allreduce_time(cfg: &CommsConfig, volume_bits: f64) -> f64 {
    let n = cfg.devices as f64;
    2.0 * (n - 1.0) / n * volume_bits / cfg.bandwidth_bps + 2.0 * (n - 1.0) * cfg.latency_s
}

pub fn comm_time(cfg: &CommsConfig, method: Method, bp: &BpCoefficients) -> f64 {
    if cfg.devices == 1 {
        return 0.0;
    }
    let shard_tokens = cfg.tokens as f64 / cfg.devices as f64;
    let full = (cfg.hidden * cfg.precision_bits) as f64;
    let layers = cfg.layers as f64;
    match method {
        Method::Single => 0.0,
        Method::Astra => layers * allgather_time(cfg, shard_tokens * cfg.index_bits() as f64),
        Method::Sp => layers * allgather_time(cfg, shard_tokens * full),
        Method::Tp => layers * 2.0 * allreduce_time(cfg, cfg.tokens as f64 * full),
        Method::BpAg { nb } => nb as f64 * allgather_time(cfg, shard_tokens * full),
        Method::BpSp { nb } => (bp.sp_rounds * nb) as f64 * allgather_time(cfg, shard_tokens * full),
    }
}

pub fn compute_time(cfg: &CommsConfig, method: Method, profile: &DeviceProfile, bp: &BpCoefficients) -> f64 {
    let single = model_flops(cfg.layers, cfg.hidden, cfg.tokens) * profile.seconds_per_flop;
    let n = cfg.devices as f64;
    match method {
        Method::Single => single,
        Method::Tp | Method::Sp => single / n,
        Method::Astra => {
            // nearest-centroid search: K distances of width D per local token
            let quant = cfg.layers as f64 * (cfg.tokens as f64 / n) * 2.0 * (cfg.codebook_size * cfg.hidden) as f64;
            single / n + quant * profile.seconds_per_flop
        }
        Method::BpAg { .. } => bp.ag_compute * single / n,
        Method::BpSp { .. } => bp.sp_compute * single / n,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyReport {
    pub compute_s: f64,
    pub comm_s: f64,
    pub total_s: f64,
    pub speedup: f64,
}

impl LatencyReport {
    pub fn comm_fraction(&self) -> f64 {
        if self.total_s == 0.0 {
            0.0
        } else {
            self.comm_s / self.total_s
        }
    }
}

pub fn latency(cfg: &CommsConfig, method: Method, profile: &DeviceProfile, bp: &BpCoefficients) -> LatencyReport {
    let compute_s = compute_time(cfg, method, profile, bp);
    let comm_s = comm_time(cfg, method, bp);
    let total_s = compute_s + comm_s;
    let single = compute_time(cfg, Method::Single, profile, bp);
    LatencyReport {
        compute_s,
        comm_s,
        total_s,
        speedup: if total_s > 0.0 { single / total_s } else { 1.0 },
    }
}

/// `(compute seconds, communication seconds, communication fraction)`.
pub fn latency_breakdown(cfg: &CommsConfig, method: Method, profile: &DeviceProfile, bp: &BpCoefficients) -> (f64, f64, f64) {
    let r = latency(cfg, method, profile, bp);
    (r.compute_s, r.comm_s, r.comm_fraction())
}

/// Grid for [`speedup_table`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub base: CommsConfig,
    pub bandwidths_mbps: Vec<f64>,
    pub devices: Vec<u64>,
    pub tokens: Vec<u64>,
    pub methods: Vec<Method>,
    pub profile: DeviceProfile,
    pub bp: BpCoefficients,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupRow {
    pub method: String,
    pub nb: u64,
    pub bandwidth_mbps: f64,
    pub devices: u64,
    pub tokens: u64,
    pub bits_per_token: Ratio<u64>,
    pub report: LatencyReport,
}

/// Rows in (bandwidth, devices, tokens, method) order.
pub fn speedup_table(sweep: &Sweep) -> Result<Vec<SpeedupRow>> {
    let mut rows = Vec::new();
    for &bw in &sweep.bandwidths_mbps {
        for &n in &sweep.devices {
            for &t in &sweep.tokens {
                let cfg = CommsConfig {
                    bandwidth_bps: bw * 1e6,
                    devices: n,
                    tokens: t,
                    ..sweep.base
                };
                cfg.validate()?;
                for &m in &sweep.methods {
                    m.validate(cfg.layers)?;
                    rows.push(SpeedupRow {
                        method: m.label(cfg.groups),
                        nb: m.nb(),
                        bandwidth_mbps: bw,
                        devices: n,
                        tokens: t,
                        bits_per_token: bits_per_token_with(&cfg, m, &sweep.bp),
                        report: latency(&cfg, m, &sweep.profile, &sweep.bp),
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// `x` with six significant digits, trailing zeros trimmed.
pub struct Sig6(pub f64);

impl fmt::Display for Sig6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let x = self.0;
        if x == 0.0 || !x.is_finite() {
            return write!(f, "{x}");
        }
        let exp = x.abs().log10().floor() as i32;
        if !(-4..6).contains(&exp) {
            let s = format!("{x:.5e}");
            let (mant, e) = s.split_once('e').unwrap();
            let mant = trim(mant);
            return write!(f, "{mant}e{e}");
        }
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // rounding can carry into a new digit, e.g. 999999.5
        let s = if s.trim_start_matches('-').split('.').next().unwrap().trim_start_matches('0').len() > 6 {
            format!("{x:.5e}")
        } else {
            s
        };
        write!(f, "{}", trim(&s))
    }
}

fn trim(s: &str) -> &str {
    if s.contains('.') && !s.contains('e') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn speedup_csv(rows: &[SpeedupRow]) -> String {
    let mut s = String::from("method,Nb,bandwidth_mbps,devices,tokens,compute_s,comm_s,total_s,speedup\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            r.nb,
            Sig6(r.bandwidth_mbps),
            r.devices,
            r.tokens,
            Sig6(r.report.compute_s),
            Sig6(r.report.comm_s),
            Sig6(r.report.total_s),
            Sig6(r.report.speedup)
        )
        .unwrap();
    }
    s
}

/// One row per (configuration, metric), for plotting tools.
pub fn speedup_long_csv(rows: &[SpeedupRow]) -> String {
    let mut s = String::from("method,Nb,bandwidth_mbps,devices,tokens,metric,value\n");
    for r in rows {
        let bits = *r.bits_per_token.numer() as f64 / *r.bits_per_token.denom() as f64;
        for (metric, v) in [
            ("compute_s", r.report.compute_s),
            ("comm_s", r.report.comm_s),
            ("total_s", r.report.total_s),
            ("speedup", r.report.speedup),
            ("comm_fraction", r.report.comm_fraction()),
            ("bits_per_token", bits),
        ] {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.method,
                r.nb,
                Sig6(r.bandwidth_mbps),
                r.devices,
                r.tokens,
                metric,
                Sig6(v)
            )
            .unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vit() -> CommsConfig {
        CommsConfig::default()
    }

    #[test]
    fn bits_per_token_examples() {
        let c = vit();
        assert_eq!(bits_per_token(&c, Method::Astra), Ratio::from_integer(120));
        assert_eq!(bits_per_token(&CommsConfig { groups: 16, ..c }, Method::Astra), Ratio::from_integer(1920));
        assert_eq!(bits_per_token(&CommsConfig { groups: 32, ..c }, Method::Astra), Ratio::from_integer(3840));
        assert_eq!(bits_per_token(&CommsConfig { layers: 24, ..c }, Method::Astra), Ratio::from_integer(240));
        assert_eq!(bits_per_token(&c, Method::Sp), Ratio::from_integer(294_912));
        assert_eq!(bits_per_token(&c, Method::Tp), Ratio::from_integer(4 * 294_912));
        assert_eq!(bits_per_token(&c, Method::Single), Ratio::from_integer(0));
    }

    #[test]
    fn compression_ratio_examples() {
        let c = vit();
        assert_eq!(compression_ratio(&c).unwrap(), Ratio::new(24_576, 10));
        assert_eq!(compression_ratio(&c).unwrap(), Ratio::new(294_912, 120));
        assert_eq!(compression_ratio(&CommsConfig { groups: 32, ..c }).unwrap(), Ratio::new(768, 10));
        assert_eq!(compression_ratio(&CommsConfig { hidden: 1024, ..c }).unwrap(), Ratio::new(32_768, 10));
        assert!(compression_ratio(&CommsConfig { codebook_size: 1, ..c }).is_err());
    }

    #[test]
    fn comm_time_hand_values() {
        let c = CommsConfig { bandwidth_bps: 10e6, ..vit() };
        let bp = BpCoefficients::default();
        let sp = comm_time(&c, Method::Sp, &bp);
        assert!((sp - 12.0 * 3.0 * (256.0 * 768.0 * 32.0) / 1e7).abs() < 1e-9);
        assert!((sp - 22.65).abs() < 0.01);
        let astra = comm_time(&c, Method::Astra, &bp);
        assert!((astra - 0.009216).abs() < 1e-12);
        let tp = comm_time(&c, Method::Tp, &bp);
        assert!((tp - 12.0 * 2.0 * 1.5 * 1024.0 * 768.0 * 32.0 / 1e7).abs() < 1e-9);
        assert_eq!(comm_time(&CommsConfig { devices: 1, ..c }, Method::Sp, &bp), 0.0);
        let lat = CommsConfig { latency_s: 1e-3, ..c };
        assert!((comm_time(&lat, Method::Astra, &bp) - astra - 12.0 * 3.0 * 1e-3).abs() < 1e-12);
    }

    #[test]
    fn compute_time_examples() {
        let p = DeviceProfile::vit_base();
        let bp = BpCoefficients::default();
        let c = vit();
        assert!((compute_time(&CommsConfig { devices: 1, ..c }, Method::Single, &p, &bp) - 0.35).abs() < 1e-12);
        let one = compute_time(&CommsConfig { devices: 1, ..c }, Method::Sp, &p, &bp);
        let two = compute_time(&CommsConfig { devices: 2, ..c }, Method::Sp, &p, &bp);
        assert!((one - 2.0 * two).abs() < 1e-12);
        let zero = DeviceProfile { seconds_per_flop: 0.0 };
        assert_eq!(compute_time(&c, Method::Astra, &zero, &bp), 0.0);
    }

    #[test]
    fn comm_only_ratio_equals_compression() {
        let zero = DeviceProfile { seconds_per_flop: 0.0 };
        let bp = BpCoefficients::default();
        for bw in [1e6, 1e7, 5e8] {
            let c = CommsConfig { bandwidth_bps: bw, ..vit() };
            let ratio = latency(&c, Method::Sp, &zero, &bp).total_s / latency(&c, Method::Astra, &zero, &bp).total_s;
            assert!((ratio - 2457.6).abs() < 1e-6);
        }
    }

    #[test]
    fn comm_fractions_at_ten_mbps() {
        let p = DeviceProfile::vit_base();
        let bp = BpCoefficients::default();
        let c = CommsConfig { bandwidth_bps: 10e6, ..vit() };
        assert!(latency_breakdown(&c, Method::Sp, &p, &bp).2 > 0.9);
        assert!(latency_breakdown(&c, Method::Astra, &p, &bp).2 < 0.5);
        let fast = CommsConfig { bandwidth_bps: 1e18, ..c };
        assert!(latency_breakdown(&fast, Method::Sp, &p, &bp).2 < 1e-6);
    }

    #[test]
    fn single_device_speedup_is_one() {
        let sweep = Sweep {
            base: vit(),
            bandwidths_mbps: vec![10.0, 100.0],
            devices: vec![1, 4],
            tokens: vec![1024],
            methods: vec![Method::Single, Method::Astra, Method::BpAg { nb: 2 }],
            profile: DeviceProfile::vit_base(),
            bp: BpCoefficients::default(),
        };
        let rows = speedup_table(&sweep).unwrap();
        assert_eq!(rows.len(), 12);
        for r in rows.iter().filter(|r| r.method == "single") {
            assert_eq!(r.report.speedup, 1.0);
        }
        let csv = speedup_csv(&rows);
        assert!(csv.starts_with("method,Nb,bandwidth_mbps,devices,tokens,compute_s,comm_s,total_s,speedup\n"));
        assert!(csv.contains("\nastra_g1,0,10,4,1024,"));
        assert!(csv.contains("\nbp_ag,2,"));
        let bad = Sweep { methods: vec![Method::BpSp { nb: 0 }], ..sweep };
        assert!(speedup_table(&bad).is_err());
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(Sig6(0.35).to_string(), "0.35");
        assert_eq!(Sig6(22.6492416).to_string(), "22.6492");
        assert_eq!(Sig6(2457.6).to_string(), "2457.6");
        assert_eq!(Sig6(0.009216).to_string(), "0.009216");
        assert_eq!(Sig6(1.0).to_string(), "1");
        assert_eq!(Sig6(123456789.0).to_string(), "1.23457e8");
        assert_eq!(Sig6(0.0000123456789).to_string(), "1.23457e-5");
        assert_eq!(Sig6(999999.7).to_string(), "1.00000e6");
        assert_eq!(Sig6(0.0).to_string(), "0");
    }

    fn config() -> impl Strategy<Value = CommsConfig> {
        (1u64..=48, 1u64..=64, 1u64..=4096, 2u64..=16, 1u64..=8, 1u64..=4096, 0.0f64..1e-2, 1.0f64..1e9).prop_map(
            |(layers, d, t, n, g, k, lat, bw)| CommsConfig {
                precision_bits: 32,
                hidden: d * g,
                layers,
                tokens: t.max(n),
                devices: n,
                bandwidth_bps: bw,
                latency_s: lat,
                codebook_size: k.max(2),
                groups: g,
            },
        )
    }

    proptest! {
        #[test]
        fn comm_time_monotone(c in config(), factor in 1.01f64..10.0) {
            let bp = BpCoefficients::default();
            for m in [Method::Astra, Method::Sp, Method::Tp, Method::BpAg { nb: 1 }] {
                let base = comm_time(&c, m, &bp);
                let wider = CommsConfig { bandwidth_bps: c.bandwidth_bps * factor, ..c };
                let faster = comm_time(&wider, m, &bp);
                prop_assert!(faster < base);
                let more_tokens = CommsConfig { tokens: c.tokens + 1, ..c };
                let more_layers = CommsConfig { layers: c.layers + 1, ..c };
                let slower_link = CommsConfig { latency_s: c.latency_s + 1e-3, ..c };
                prop_assert!(comm_time(&more_tokens, m, &bp) >= base);
                prop_assert!(comm_time(&more_layers, m, &bp) >= base);
                prop_assert!(comm_time(&slower_link, m, &bp) >= base);
            }
        }

        #[test]
        fn dominance_in_comm_only_regime(c in config()) {
            prop_assume!(c.index_bits() < c.hidden * c.precision_bits);
            let c = CommsConfig { latency_s: 0.0, ..c };
            let bp = BpCoefficients::default();
            let a = comm_time(&c, Method::Astra, &bp);
            let s = comm_time(&c, Method::Sp, &bp);
            let t = comm_time(&c, Method::Tp, &bp);
            prop_assert!(a < s && s < t);
        }

        #[test]
        fn report_identities(c in config()) {
            let p = DeviceProfile::vit_base();
            let bp = BpCoefficients::default();
            for m in [Method::Single, Method::Astra, Method::Sp, Method::Tp, Method::BpSp { nb: 1 }] {
                let r = latency(&c, m, &p, &bp);
                prop_assert_eq!(r.total_s, r.compute_s + r.comm_s);
                let single = latency(&c, Method::Single, &p, &bp).total_s;
                prop_assert!((r.speedup - single / r.total_s).abs() <= 1e-12 * r.speedup);
            }
        }
    }
}
