//! Compression factors, per-flow averages, and LoRa time-on-air.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("compressed size is zero")]
    DivisionByZero,
    #[error("no packets to average over")]
    EmptyInput,
    #[error("invalid LoRa parameters: {0}")]
    InvalidParams(String),
    #[error("duty cycle {0} outside (0, 1]")]
    InvalidDuty(f64),
}

/// Uncompressed header size over compressed header size.
pub fn compression_factor(
    uncompressed_octets: usize,
    compressed_octets: usize,
) -> Result<f64, MetricsError> {
    if compressed_octets == 0 {
        return Err(MetricsError::DivisionByZero);
    }
    Ok(uncompressed_octets as f64 / compressed_octets as f64)
}

/// Header sizes of one flow. Packet counts may be fractional averages.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStats {
    pub flow_label: String,
    pub packet_count: f64,
    pub uncompressed_header_octets: usize,
    pub compressed_header_octets: usize,
}

impl FlowStats {
    pub fn new(
        label: impl Into<String>,
        count: f64,
        uncompressed: usize,
        compressed: usize,
    ) -> Self {
        Self {
            flow_label: label.into(),
            packet_count: count,
            uncompressed_header_octets: uncompressed,
            compressed_header_octets: compressed,
        }
    }

    pub fn compression_factor(&self) -> Result<f64, MetricsError> {
        compression_factor(
            self.uncompressed_header_octets,
            self.compressed_header_octets,
        )
    }
}

/// Count-weighted mean of compressed header octets per packet.
pub fn average_octets_per_packet(stats: &[FlowStats]) -> Result<f64, MetricsError> {
    let total: f64 = stats.iter().map(|s| s.packet_count).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(MetricsError::EmptyInput);
    }
    let weighted: f64 = stats
        .iter()
        .map(|s| s.packet_count * s.compressed_header_octets as f64)
        .sum();
    Ok(weighted / total)
}

/// LoRa modem settings for one transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraParams {
    pub spreading_factor: u8,
    pub bandwidth_hz: u32,
    /// Denominator of the 4/x coding rate, 5..=8.
    pub coding_rate_denominator: u8,
    pub preamble_symbols: u16,
    pub explicit_header: bool,
    pub crc: bool,
    pub low_data_rate_optimize: bool,
    pub duty_cycle: f64,
}

impl LoraParams {
    /// 125 kHz, CR 4/5, 8 preamble symbols, explicit header, CRC on,
    /// 0.1 % duty cycle. Low-data-rate optimisation follows the usual
    /// rule of a symbol time above 16 ms.
    pub fn eu868_defaults(spreading_factor: u8) -> Self {
        let mut p = Self {
            spreading_factor,
            bandwidth_hz: 125_000,
            coding_rate_denominator: 5,
            preamble_symbols: 8,
            explicit_header: true,
            crc: true,
            low_data_rate_optimize: false,
            duty_cycle: 0.001,
        };
        p.low_data_rate_optimize = p.symbol_time_ms() > 16.0;
        p
    }

    pub fn symbol_time_ms(&self) -> f64 {
        2f64.powi(i32::from(self.spreading_factor)) / f64::from(self.bandwidth_hz) * 1000.0
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: String| Err(MetricsError::InvalidParams(m));
        if !(7..=12).contains(&self.spreading_factor) {
            return bad(format!(
                "spreading factor {} outside 7..=12",
                self.spreading_factor
            ));
        }
        if ![125_000, 250_000, 500_000].contains(&self.bandwidth_hz) {
            return bad(format!(
                "bandwidth {} Hz not one of 125/250/500 kHz",
                self.bandwidth_hz
            ));
        }
        if !(5..=8).contains(&self.coding_rate_denominator) {
            return bad(format!(
                "coding rate 4/{} outside 4/5..4/8",
                self.coding_rate_denominator
            ));
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return bad(format!("duty cycle {} outside (0, 1]", self.duty_cycle));
        }
        Ok(())
    }
}

/// Number of payload symbols, including the 8 fixed ones.
pub fn payload_symbols(params: &LoraParams, payload_octets: usize) -> u64 {
    let sf = i64::from(params.spreading_factor);
    let crc = i64::from(params.crc);
    let h = i64::from(!params.explicit_header);
    let de = i64::from(params.low_data_rate_optimize);
    let numerator = 8 * payload_octets as i64 - 4 * sf + 28 + 16 * crc - 20 * h;
    let denominator = 4 * (sf - 2 * de);
    let blocks =
        numerator.div_euclid(denominator) + i64::from(numerator.rem_euclid(denominator) != 0);
    8 + (blocks * i64::from(params.coding_rate_denominator)).max(0) as u64
}

/// Transmission time in milliseconds for `payload_octets` of PHY payload.
pub fn lora_time_on_air(params: &LoraParams, payload_octets: usize) -> Result<f64, MetricsError> {
    params.validate()?;
    if payload_octets == 0 {
        return Err(MetricsError::InvalidParams(
            "payload must be at least one octet".into(),
        ));
    }
    let t_sym = params.symbol_time_ms();
    let preamble = (f64::from(params.preamble_symbols) + 4.25) * t_sym;
    Ok(preamble + payload_symbols(params, payload_octets) as f64 * t_sym)
}

/// Mandatory silence after a transmission of `toa_ms` under `duty`.
pub fn duty_cycle_min_interval(toa_ms: f64, duty: f64) -> Result<f64, MetricsError> {
    if !(duty > 0.0 && duty <= 1.0) {
        return Err(MetricsError::InvalidDuty(duty));
    }
    Ok(toa_ms * (1.0 / duty - 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AirtimeRow {
    pub flow_label: String,
    pub header_octets: usize,
    /// One entry per parameter set, in the order given.
    pub airtime_ms: Vec<f64>,
}

/// Airtime of each flow's compressed headers under each parameter set.
pub fn airtime_report(
    stats: &[FlowStats],
    params_per_sf: &[LoraParams],
) -> Result<Vec<AirtimeRow>, MetricsError> {
    stats
        .iter()
        .map(|s| {
            let airtime_ms = params_per_sf
                .iter()
                .map(|p| lora_time_on_air(p, s.compressed_header_octets))
                .collect::<Result<_, _>>()?;
            Ok(AirtimeRow {
                flow_label: s.flow_label.clone(),
                header_octets: s.compressed_header_octets,
                airtime_ms,
            })
        })
        .collect()
}
