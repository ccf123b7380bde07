//! Replay of the RPL/UDP two-node benchmark.
//!
//! A sender and a receiver exchange three flows: RPL control messages from
//! the sender's link-local address to the all-RPL-nodes multicast group
//! (a), RPL control messages between the two link-local addresses (b), and
//! "Hello" UDP datagrams between global addresses (c). Packets are drawn
//! from a seeded generator, compressed, decompressed and checked, and the
//! header sizes are weighted by the reported average packet counts.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::catalog::{
    benchmark_flat_context, benchmark_layered_context, shared_ipv6_flat, shared_ipv6_layered,
    ALL_RPL_NODES_IID, CLIENT_PORT, GLOBAL_PREFIX, ICMPV6_RPL_TYPE, LINK_LOCAL_MULTICAST_PREFIX,
    LINK_LOCAL_PREFIX, RECEIVER_IID, SENDER_IID, SERVER_PORT,
};
use crate::context::{Context, Mode};
use crate::engine::{compress, decompress, DecompressionEnvironment, EngineError};
use crate::metrics::{
    airtime_report, average_octets_per_packet, AirtimeRow, FlowStats, LoraParams, MetricsError,
};
use crate::packet::{
    serialize_stack, Direction, HeaderStack, Icmpv6Header, Ipv6Header, Transport, UdpHeader,
    NEXT_HEADER_ICMPV6, NEXT_HEADER_UDP,
};

/// Average SCHC header octets per packet reported for the emulation run.
pub const REPORTED_SCHC_AVERAGE: f64 = 2.66;
/// Average IPHC/NHC header octets per packet reported for the emulation run.
pub const REPORTED_IPHC_AVERAGE: f64 = 7.69;
/// Reported average UDP and ICMPv6 packet counts under SCHC.
pub const REPORTED_SCHC_COUNTS: (f64, f64) = (358.33, 301.66);
/// Reported average UDP and ICMPv6 packet counts under IPHC/NHC.
pub const REPORTED_IPHC_COUNTS: (f64, f64) = (350.0, 308.33);
/// Reported IPHC/NHC compressed header octets for ICMPv6 and UDP flows.
pub const REPORTED_IPHC_ICMPV6_OCTETS: usize = 6;
pub const REPORTED_IPHC_UDP_OCTETS: usize = 4;

pub const DEFAULT_SEED: u64 = 0x5c4c_2018;
pub const DEFAULT_PACKETS_PER_FLOW: usize = 360;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("flow {flow}: {source}")]
    Engine {
        flow: &'static str,
        #[source]
        source: EngineError,
    },
    #[error("flow {flow}: packet {index} did not survive the round trip")]
    RoundTrip { flow: &'static str, index: usize },
    #[error("flow {flow}: header size varies between {first} and {other} octets")]
    UnstableSize {
        flow: &'static str,
        first: usize,
        other: usize,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    /// RPL control to ff02::1a from a link-local source.
    RplMulticast,
    /// RPL control between two link-local addresses.
    RplUnicast,
    /// UDP "Hello" between global addresses.
    UdpHello,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTemplate {
    pub label: &'static str,
    pub kind: FlowKind,
    pub packet_count: f64,
    /// Reported IPHC/NHC header size, for comparison only.
    pub iphc_octets: usize,
}

fn ipv6(next_header: u8, hop_limit: u8, src: (u64, u64), dst: (u64, u64)) -> Ipv6Header {
    Ipv6Header {
        next_header,
        hop_limit,
        src_prefix: src.0,
        src_iid: src.1,
        dst_prefix: dst.0,
        dst_iid: dst.1,
        ..Ipv6Header::default()
    }
}

impl FlowTemplate {
    /// One packet of this flow, with varying payload content.
    pub fn generate(&self, rng: &mut impl Rng) -> HeaderStack {
        let (network, transport, payload) = match self.kind {
            FlowKind::RplMulticast | FlowKind::RplUnicast => {
                let (code, body_len, dst) = match self.kind {
                    FlowKind::RplMulticast => {
                        let dio = rng.gen_bool(0.8);
                        let dst = (LINK_LOCAL_MULTICAST_PREFIX, ALL_RPL_NODES_IID);
                        if dio {
                            (0x01, 24, dst)
                        } else {
                            (0x00, 2, dst)
                        }
                    }
                    _ => (0x02, 20, (LINK_LOCAL_PREFIX, RECEIVER_IID)),
                };
                let body: Vec<u8> = (0..body_len).map(|_| rng.gen()).collect();
                (
                    ipv6(
                        NEXT_HEADER_ICMPV6,
                        255,
                        (LINK_LOCAL_PREFIX, SENDER_IID),
                        dst,
                    ),
                    Transport::Icmpv6(Icmpv6Header {
                        msg_type: ICMPV6_RPL_TYPE,
                        code,
                        checksum: 0,
                    }),
                    body,
                )
            }
            FlowKind::UdpHello => {
                let seq: u16 = rng.gen_range(1..1000);
                (
                    ipv6(
                        NEXT_HEADER_UDP,
                        64,
                        (GLOBAL_PREFIX, SENDER_IID),
                        (GLOBAL_PREFIX, RECEIVER_IID),
                    ),
                    Transport::Udp(UdpHeader {
                        src_port: CLIENT_PORT,
                        dst_port: SERVER_PORT,
                        length: 0,
                        checksum: 0,
                    }),
                    format!("Hello {seq}").into_bytes(),
                )
            }
        };
        let mut stack = HeaderStack {
            network,
            transport: Some(transport),
            application: None,
            payload,
            direction: Direction::Up,
        };
        stack.refresh_lengths();
        stack.fill_checksum();
        stack
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkScenario {
    pub flows: Vec<FlowTemplate>,
    pub seed: u64,
    pub packets_per_flow: usize,
}

impl Default for BenchmarkScenario {
    /// The ICMPv6 count is split evenly between flows (a) and (b).
    fn default() -> Self {
        let (udp, icmp) = REPORTED_SCHC_COUNTS;
        let flow = |label, kind, packet_count, iphc_octets| FlowTemplate {
            label,
            kind,
            packet_count,
            iphc_octets,
        };
        Self {
            flows: vec![
                flow(
                    "a",
                    FlowKind::RplMulticast,
                    icmp / 2.0,
                    REPORTED_IPHC_ICMPV6_OCTETS,
                ),
                flow(
                    "b",
                    FlowKind::RplUnicast,
                    icmp / 2.0,
                    REPORTED_IPHC_ICMPV6_OCTETS,
                ),
                flow("c", FlowKind::UdpHello, udp, REPORTED_IPHC_UDP_OCTETS),
            ],
            seed: DEFAULT_SEED,
            packets_per_flow: DEFAULT_PACKETS_PER_FLOW,
        }
    }
}

/// Descriptor counts of a flat context and its layered counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DescriptorComparison {
    pub flat: usize,
    pub layered: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mode: Mode,
    pub flows: Vec<FlowStats>,
    pub factors: Vec<f64>,
    pub iphc_flows: Vec<FlowStats>,
    pub weighted_mean: f64,
    pub iphc_weighted_mean: f64,
    pub packets_checked: usize,
    pub benchmark_descriptors: DescriptorComparison,
    pub shared_ipv6_descriptors: DescriptorComparison,
    pub spreading_factors: Vec<u8>,
    pub airtime: Vec<AirtimeRow>,
    pub iphc_airtime: Vec<AirtimeRow>,
}

pub fn benchmark_context(mode: Mode) -> Context {
    match mode {
        Mode::Flat => benchmark_flat_context().into(),
        Mode::Layered => benchmark_layered_context().into(),
    }
}

impl BenchmarkScenario {
    pub fn run(&self, mode: Mode) -> Result<BenchReport, ScenarioError> {
        let ctx = benchmark_context(mode);
        let env = DecompressionEnvironment::new(SENDER_IID, Direction::Up);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut flows = Vec::new();
        let mut checked = 0;
        for flow in &self.flows {
            let engine = |source| ScenarioError::Engine {
                flow: flow.label,
                source,
            };
            let mut size = None;
            let mut uncompressed = 0;
            for index in 0..self.packets_per_flow.max(1) {
                let stack = flow.generate(&mut rng);
                let pkt = compress(&ctx, &stack).map_err(engine)?;
                let back = decompress(&pkt.to_bytes(), &ctx, &env).map_err(engine)?;
                let same = serialize_stack(&back).ok() == serialize_stack(&stack).ok();
                if !same {
                    return Err(ScenarioError::RoundTrip {
                        flow: flow.label,
                        index,
                    });
                }
                checked += 1;
                uncompressed = stack.header_len();
                match size {
                    None => size = Some(pkt.header_octets()),
                    Some(first) if first != pkt.header_octets() => {
                        return Err(ScenarioError::UnstableSize {
                            flow: flow.label,
                            first,
                            other: pkt.header_octets(),
                        })
                    }
                    Some(_) => {}
                }
            }
            flows.push(FlowStats::new(
                flow.label,
                flow.packet_count,
                uncompressed,
                size.unwrap_or_default(),
            ));
        }

        let factors = flows
            .iter()
            .map(FlowStats::compression_factor)
            .collect::<Result<_, _>>()?;
        let (iphc_udp, iphc_icmp) = REPORTED_IPHC_COUNTS;
        let iphc_flows: Vec<FlowStats> = self
            .flows
            .iter()
            .zip(&flows)
            .map(|(t, s)| {
                let count = match t.kind {
                    FlowKind::UdpHello => iphc_udp,
                    _ => iphc_icmp / 2.0,
                };
                FlowStats::new(t.label, count, s.uncompressed_header_octets, t.iphc_octets)
            })
            .collect();
        let spreading_factors: Vec<u8> = (7..=12).collect();
        let params: Vec<_> = spreading_factors
            .iter()
            .map(|&sf| LoraParams::eu868_defaults(sf))
            .collect();

        Ok(BenchReport {
            mode,
            weighted_mean: average_octets_per_packet(&flows)?,
            iphc_weighted_mean: average_octets_per_packet(&iphc_flows)?,
            airtime: airtime_report(&flows, &params)?,
            iphc_airtime: airtime_report(&iphc_flows, &params)?,
            flows,
            factors,
            iphc_flows,
            packets_checked: checked,
            benchmark_descriptors: DescriptorComparison {
                flat: benchmark_flat_context().descriptor_count(),
                layered: benchmark_layered_context().descriptor_count(),
            },
            shared_ipv6_descriptors: DescriptorComparison {
                flat: shared_ipv6_flat().descriptor_count(),
                layered: shared_ipv6_layered().descriptor_count(),
            },
            spreading_factors,
        })
    }
}

impl BenchReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mode: {} ({} packets round-tripped)",
            self.mode, self.packets_checked
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "compression factor per flow");
        let _ = writeln!(
            s,
            "{:<5} {:>8} {:>13} {:>11} {:>7} {:>11} {:>12}",
            "flow", "packets", "uncompressed", "compressed", "factor", "IPHC (ref)", "IPHC factor"
        );
        for ((f, factor), iphc) in self.flows.iter().zip(&self.factors).zip(&self.iphc_flows) {
            let iphc_factor = iphc.compression_factor().unwrap_or(f64::NAN);
            let _ = writeln!(
                s,
                "{:<5} {:>8.2} {:>13} {:>11} {:>7.1} {:>11} {:>12.2}",
                f.flow_label,
                f.packet_count,
                f.uncompressed_header_octets,
                f.compressed_header_octets,
                factor,
                iphc.compressed_header_octets,
                iphc_factor
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "header octets per packet");
        let _ = writeln!(
            s,
            "  computed weighted mean (SCHC):          {:.4}",
            self.weighted_mean
        );
        let _ = writeln!(
            s,
            "  computed weighted mean (IPHC constants): {:.4}",
            self.iphc_weighted_mean
        );
        let _ = writeln!(
            s,
            "  reported reference (SCHC):              {REPORTED_SCHC_AVERAGE:.2}"
        );
        let _ = writeln!(
            s,
            "  reported reference (IPHC):              {REPORTED_IPHC_AVERAGE:.2}"
        );
        let _ = writeln!(
            s,
            "  note: the reported averages cannot be derived from the per-flow sizes and packet mix"
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "stored field descriptors (flat vs layered)");
        let _ = writeln!(
            s,
            "  benchmark context:   {} vs {}",
            self.benchmark_descriptors.flat, self.benchmark_descriptors.layered
        );
        let _ = writeln!(
            s,
            "  shared IPv6 example: {} vs {}",
            self.shared_ipv6_descriptors.flat, self.shared_ipv6_descriptors.layered
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{}",
            render_airtime_text(&self.spreading_factors, &self.airtime, &self.iphc_airtime)
        );
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("section,flow,key,value\n");
        for ((f, factor), iphc) in self.flows.iter().zip(&self.factors).zip(&self.iphc_flows) {
            let l = &f.flow_label;
            let _ = writeln!(s, "flow,{l},packets,{}", f.packet_count);
            let _ = writeln!(
                s,
                "flow,{l},uncompressed_octets,{}",
                f.uncompressed_header_octets
            );
            let _ = writeln!(
                s,
                "flow,{l},compressed_octets,{}",
                f.compressed_header_octets
            );
            let _ = writeln!(s, "flow,{l},factor,{factor}");
            let _ = writeln!(
                s,
                "flow,{l},iphc_reference_octets,{}",
                iphc.compressed_header_octets
            );
        }
        let _ = writeln!(s, "average,,schc_computed,{}", self.weighted_mean);
        let _ = writeln!(s, "average,,iphc_computed,{}", self.iphc_weighted_mean);
        let _ = writeln!(
            s,
            "average,,schc_reported_reference,{REPORTED_SCHC_AVERAGE}"
        );
        let _ = writeln!(
            s,
            "average,,iphc_reported_reference,{REPORTED_IPHC_AVERAGE}"
        );
        let _ = writeln!(
            s,
            "descriptors,benchmark,flat,{}",
            self.benchmark_descriptors.flat
        );
        let _ = writeln!(
            s,
            "descriptors,benchmark,layered,{}",
            self.benchmark_descriptors.layered
        );
        let _ = writeln!(
            s,
            "descriptors,shared_ipv6,flat,{}",
            self.shared_ipv6_descriptors.flat
        );
        let _ = writeln!(
            s,
            "descriptors,shared_ipv6,layered,{}",
            self.shared_ipv6_descriptors.layered
        );
        for (scheme, rows) in [("schc", &self.airtime), ("iphc", &self.iphc_airtime)] {
            for row in rows {
                for (sf, ms) in self.spreading_factors.iter().zip(&row.airtime_ms) {
                    let _ = writeln!(s, "airtime_{scheme},{},sf{sf}_ms,{ms:.3}", row.flow_label);
                }
            }
        }
        s
    }
}

/// Airtime table with one row per flow and one column per spreading factor.
pub fn render_airtime_text(sfs: &[u8], schc: &[AirtimeRow], iphc: &[AirtimeRow]) -> String {
    let mut s = String::from(
        "LoRa airtime of the compressed headers (ms, 125 kHz, CR 4/5, 8 preamble symbols)\n",
    );
    let _ = write!(s, "{:<12} {:>7}", "flow", "octets");
    for sf in sfs {
        let _ = write!(s, " {:>9}", format!("SF{sf}"));
    }
    s.push('\n');
    for (scheme, rows) in [("SCHC", schc), ("IPHC (ref)", iphc)] {
        for row in rows {
            let _ = write!(
                s,
                "{:<12} {:>7}",
                format!("{} {}", row.flow_label, scheme),
                row.header_octets
            );
            for ms in &row.airtime_ms {
                let _ = write!(s, " {ms:>9.3}");
            }
            s.push('\n');
        }
    }
    s
}
