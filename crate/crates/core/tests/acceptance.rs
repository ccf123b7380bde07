//! Acceptance checks, one PASS/FAIL line each. Exits non-zero on any failure.

mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lschc::catalog::{
    figure3_rule, ipv6_rule, shared_ipv6_flat, shared_ipv6_layered, udp_port_rule, ALPHA_PREFIX,
    BETA_PREFIX, REFERENCE_DST_IID, REFERENCE_PORT, SENDER_IID,
};
use lschc::context::{Context, FlatContext, FlatRule, LayeredContext, Mode, RuleIdLayout};
use lschc::engine::{
    compress, compress_flat, decompress, decompress_with, match_rule, select_rule_flat,
    select_rule_layered, CompressedPacket, DecompressionEnvironment,
};
use lschc::metrics::{lora_time_on_air, LoraParams};
use lschc::packet::{
    serialize_stack, Direction, HeaderStack, Ipv6Header, Layer, Transport, UdpHeader,
    NEXT_HEADER_UDP,
};
use lschc::registry::{DeviceAddress, RuleRegistry, RuleSlot, StoredRule};
use lschc::scenario::{
    benchmark_context, BenchmarkScenario, FlowKind, REPORTED_IPHC_AVERAGE, REPORTED_SCHC_AVERAGE,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{
    flat_context_for, kinds, layered_context_for, matching_fields, random_packet, random_shape,
    wide_layout, Shape,
};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Option<Duration>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn bytes(stack: &HeaderStack) -> Result<Vec<u8>, String> {
    serialize_stack(stack).map_err(err)
}

fn round_trip(
    ctx: &Context,
    stack: &HeaderStack,
    device_iid: u64,
) -> Result<CompressedPacket, String> {
    let pkt = compress(ctx, stack).map_err(err)?;
    let env = DecompressionEnvironment::new(device_iid, stack.direction);
    let back = decompress(&pkt.to_bytes(), ctx, &env).map_err(err)?;
    ensure!(
        bytes(&back)? == bytes(stack)?,
        "decompressed packet differs from the original"
    );
    Ok(pkt)
}

/// An IPv6/UDP packet from the device to Beta::1000, port 5683 on both ends.
fn reference_packet(dst_port: u16) -> HeaderStack {
    let mut stack = HeaderStack {
        network: Ipv6Header {
            next_header: NEXT_HEADER_UDP,
            hop_limit: 255,
            src_prefix: ALPHA_PREFIX,
            src_iid: SENDER_IID,
            dst_prefix: BETA_PREFIX,
            dst_iid: REFERENCE_DST_IID,
            ..Ipv6Header::default()
        },
        transport: Some(Transport::Udp(UdpHeader {
            src_port: REFERENCE_PORT,
            dst_port,
            length: 0,
            checksum: 0,
        })),
        application: None,
        payload: b"\x00reading=21.5".to_vec(),
        direction: Direction::Up,
    };
    stack.refresh_lengths();
    stack.fill_checksum();
    stack
}

fn reference_layered() -> LayeredContext {
    let mut ctx = LayeredContext::new(RuleIdLayout::default());
    ctx.push(ipv6_rule(0));
    ctx.push(udp_port_rule(0, REFERENCE_PORT));
    ctx
}

fn c1_one_octet_udp() -> Check {
    let stack = reference_packet(REFERENCE_PORT);
    ensure!(
        stack.header_len() == 48,
        "reference headers are {} octets",
        stack.header_len()
    );
    let flat: Context = FlatContext::new(vec![figure3_rule(0)], RuleIdLayout::default()).into();
    let pkt = round_trip(&flat, &stack, SENDER_IID)?;
    ensure!(
        pkt.header_octets() == 1,
        "flat: {} octets",
        pkt.header_octets()
    );
    ensure!(
        pkt.residue_bits() == 0,
        "flat: residue {} bits",
        pkt.residue_bits()
    );
    ensure!(
        pkt.to_bytes()[0] == 0xA0,
        "flat: first octet {:#04x}",
        pkt.to_bytes()[0]
    );

    let layered: Context = reference_layered().into();
    let lpkt = round_trip(&layered, &stack, SENDER_IID)?;
    ensure!(
        lpkt.header_octets() == 1,
        "layered: {} octets",
        lpkt.header_octets()
    );
    Ok(format!(
        "48 -> {} octet (flat {:#04x}, layered {:#04x})",
        pkt.header_octets(),
        pkt.to_bytes()[0],
        lpkt.to_bytes()[0]
    ))
}

fn c2_two_octet_icmpv6() -> Check {
    let scenario = BenchmarkScenario::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen = 0;
    for mode in [Mode::Flat, Mode::Layered] {
        let ctx = benchmark_context(mode);
        for flow in scenario
            .flows
            .iter()
            .filter(|f| f.kind != FlowKind::UdpHello)
        {
            for _ in 0..50 {
                let stack = flow.generate(&mut rng);
                ensure!(
                    stack.header_len() == 44,
                    "flow {}: {} header octets",
                    flow.label,
                    stack.header_len()
                );
                let pkt = round_trip(&ctx, &stack, SENDER_IID)?;
                ensure!(
                    pkt.header_octets() == 2,
                    "flow {} ({mode}): {} octets",
                    flow.label,
                    pkt.header_octets()
                );
                seen += 1;
            }
        }
    }
    Ok(format!(
        "44 -> 2 octets for {seen} RPL packets, flat and layered"
    ))
}

fn c3_uncompressed_framing() -> Check {
    let mut stack = reference_packet(9999);
    stack.network.hop_limit = 64;
    let original = bytes(&stack)?;
    let contexts: [Context; 2] = [
        FlatContext::new(vec![figure3_rule(0)], RuleIdLayout::default()).into(),
        reference_layered().into(),
    ];
    for ctx in &contexts {
        let pkt = round_trip(ctx, &stack, SENDER_IID)?;
        let wire = pkt.to_bytes();
        ensure!(
            wire[0] == 0b1011_1111,
            "{}: first octet {:#010b}",
            ctx.mode(),
            wire[0]
        );
        ensure!(
            wire[1..] == original[..],
            "{}: headers not carried verbatim",
            ctx.mode()
        );
    }
    Ok(format!(
        "rule ID 31, {} octets = 1 + original",
        original.len() + 1
    ))
}

fn c4_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layouts = [RuleIdLayout::default(), wide_layout()];
    let total = 12_000;
    for i in 0..total {
        let direction = if i % 2 == 0 {
            Direction::Up
        } else {
            Direction::Down
        };
        let layout = layouts[(i / 2) % 2];
        let device_iid: u64 = rng.gen();
        let shape = random_shape(&mut rng);
        let stack = random_packet(&mut rng, shape, direction, device_iid);
        let ctx: Context = if (i / 4) % 2 == 0 {
            let n = rng.gen_range(1..=12);
            flat_context_for(&mut rng, &stack, device_iid, n, layout).into()
        } else {
            let decoys = rng.gen_range(0..4);
            let partial = rng.gen_bool(0.3);
            layered_context_for(&mut rng, &stack, device_iid, decoys, partial, layout).into()
        };
        round_trip(&ctx, &stack, device_iid).map_err(|e| format!("case {i} ({shape:?}): {e}"))?;
    }
    Ok(format!(
        "{total} random (context, packet, direction) triples"
    ))
}

fn c5_flat_layered_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layouts = [RuleIdLayout::default(), wide_layout()];
    let (mut compared, mut shared_cases, mut attempts) = (0, 0, 0);
    while compared < 1_200 {
        attempts += 1;
        ensure!(
            attempts < 20_000,
            "only {compared} fully matched contexts generated"
        );
        let direction = if rng.gen() {
            Direction::Up
        } else {
            Direction::Down
        };
        let device_iid: u64 = rng.gen();
        let shape = *[Shape::Udp, Shape::Coap, Shape::Icmpv6, Shape::Bare]
            .choose(&mut rng)
            .unwrap();
        let stack = random_packet(&mut rng, shape, direction, device_iid);
        let layout = layouts[attempts % 2];
        let decoys = rng.gen_range(0..5);
        let layered = layered_context_for(&mut rng, &stack, device_iid, decoys, false, layout);
        let selection = select_rule_layered(&layered, &stack);
        if Layer::ALL
            .iter()
            .any(|&l| stack.header(l).is_some() && selection.get(l).is_none())
        {
            continue;
        }
        let (flat, origins) = layered.flatten_with_origins();
        let lp = compress(&layered.clone().into(), &stack).map_err(err)?;
        let fp = compress_flat(&flat, &stack).map_err(err)?;
        ensure!(
            lp.residue == fp.residue,
            "attempt {attempts}: residues differ ({} vs {} bits)",
            lp.residue.len(),
            fp.residue.len()
        );
        ensure!(
            lp.raw_headers == fp.raw_headers,
            "attempt {attempts}: raw headers differ"
        );
        ensure!(
            lp.payload == fp.payload,
            "attempt {attempts}: payloads differ"
        );

        let mut uses = std::collections::BTreeMap::new();
        for o in &origins {
            *uses.entry((Layer::Network, o.nlc)).or_insert(0) += 1;
            for (layer, id) in [(Layer::Transport, o.tlc), (Layer::Application, o.alc)] {
                if let Some(id) = id {
                    *uses.entry((layer, id)).or_insert(0) += 1;
                }
            }
        }
        let every_rule_used = Layer::ALL.iter().all(|&l| {
            layered
                .rules(l)
                .iter()
                .all(|r| uses.contains_key(&(l, r.local_id)))
        });
        if every_rule_used && uses.values().any(|&n| n > 1) {
            shared_cases += 1;
            ensure!(
                layered.descriptor_count() < flat.descriptor_count(),
                "attempt {attempts}: shared rule but {} >= {} descriptors",
                layered.descriptor_count(),
                flat.descriptor_count()
            );
        }
        compared += 1;
    }
    let (f, l) = (
        shared_ipv6_flat().descriptor_count(),
        shared_ipv6_layered().descriptor_count(),
    );
    ensure!(
        (f, l) == (28, 18),
        "shared IPv6 example: {f} flat vs {l} layered descriptors"
    );
    Ok(format!(
        "{compared} contexts identical; {shared_cases} with sharing all smaller; shared IPv6 example {l} vs {f} descriptors"
    ))
}

fn c6_network_only_match() -> Check {
    let stack = reference_packet(7000);
    let mut stack = stack;
    if let Some(Transport::Udp(udp)) = &mut stack.transport {
        udp.src_port = 7001;
    }
    stack.fill_checksum();
    let partial: Context = shared_ipv6_layered().into();
    let pkt = round_trip(&partial, &stack, SENDER_IID)?;
    let sel = select_rule_layered(&shared_ipv6_layered(), &stack);
    ensure!(
        sel.nlc.is_some() && sel.tlc.is_none(),
        "expected a network-only match, got {sel:?}"
    );
    let none: Context = LayeredContext::new(RuleIdLayout::default()).into();
    let framing = round_trip(&none, &stack, SENDER_IID)?.header_octets();
    ensure!(framing == 49, "uncompressed framing is {framing} octets");
    ensure!(
        pkt.header_octets() < framing,
        "{} octets is not below {framing}",
        pkt.header_octets()
    );
    Ok(format!(
        "{} octets < {framing} uncompressed",
        pkt.header_octets()
    ))
}

fn c7_selection_optimality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layout = RuleIdLayout::default();
    let (mut ties, mut residue_only) = (0, 0);
    let cases = 3_000;
    for case in 0..cases {
        let direction = if rng.gen() {
            Direction::Up
        } else {
            Direction::Down
        };
        let device_iid: u64 = rng.gen();
        let shape = random_shape(&mut rng);
        let stack = random_packet(&mut rng, shape, direction, device_iid);
        let all = kinds(&stack);
        let full_depth = case % 2 == 0;
        let matching = rng.gen_range(1..=6);
        let total = rng.gen_range(matching..=16);
        let mut ids: Vec<u32> = (0..layout.reserved_flat()).collect();
        ids.shuffle(&mut rng);
        let mut rules = Vec::new();
        for (i, &rule_id) in ids.iter().take(total).enumerate() {
            let source = if i < matching {
                stack.clone()
            } else {
                let shape = random_shape(&mut rng);
                random_packet(&mut rng, shape, direction, device_iid)
            };
            let k = kinds(&source);
            let depth = if full_depth && i < matching {
                k.len()
            } else {
                rng.gen_range(1..=k.len())
            };
            let fields = matching_fields(&mut rng, &source, &k[..depth]);
            if rules.iter().any(|r: &FlatRule| r.fields == fields) {
                continue;
            }
            rules.push(FlatRule { rule_id, fields });
        }
        let ctx = FlatContext::new(rules, layout);

        let mut best: Option<(usize, u32, usize)> = None;
        let mut costs = Vec::new();
        for rule in &ctx.rules {
            if !match_rule(rule.fields.as_slice(), &stack) {
                continue;
            }
            let single = FlatContext::new(vec![rule.clone()], layout);
            let pkt = compress_flat(&single, &stack).map_err(err)?;
            let cost = pkt.residue_bits() + 8 * pkt.raw_headers.len();
            costs.push(cost);
            let candidate = (cost, rule.rule_id, pkt.residue_bits());
            if best.is_none_or(|b| (candidate.0, candidate.1) < (b.0, b.1)) {
                best = Some(candidate);
            }
        }
        let (cost, id, residue) = best.ok_or(format!("case {case}: no matching rule"))?;
        if costs.iter().filter(|&&c| c == cost).count() > 1 {
            ties += 1;
        }
        let sel = select_rule_flat(&ctx, &stack).ok_or(format!("case {case}: nothing selected"))?;
        ensure!(
            sel.rule_id == id && sel.cost_bits() == cost,
            "case {case}: selected {} ({} bits), brute force {id} ({cost} bits)",
            sel.rule_id,
            sel.cost_bits()
        );
        if ctx
            .rules
            .iter()
            .filter(|r| match_rule(r.fields.as_slice(), &stack))
            .all(|r| r.header_kinds().len() == all.len())
        {
            residue_only += 1;
            ensure!(
                sel.residue_bits == residue,
                "case {case}: residue {} vs {residue}",
                sel.residue_bits
            );
        }
        let pkt = compress_flat(&ctx, &stack).map_err(err)?;
        ensure!(
            u64::from(id) == pkt.rule_id.value(),
            "case {case}: compressor used rule {}",
            pkt.rule_id.value()
        );
    }
    Ok(format!(
        "{cases} contexts ({residue_only} with full-depth matches only, {ties} with ties)"
    ))
}

fn c8_compression_factors() -> Check {
    for mode in [Mode::Flat, Mode::Layered] {
        let report = BenchmarkScenario::default().run(mode).map_err(err)?;
        ensure!(
            report.factors == vec![22.0, 22.0, 48.0],
            "{mode}: factors {:?}",
            report.factors
        );
    }
    Ok("(a) 22.0, (b) 22.0, (c) 48.0 in both modes".into())
}

/// Textbook LoRa time on air: explicit header, CRC on, LDRO above 16 ms symbols.
fn oracle_toa_ms(sf: u32, payload: usize) -> f64 {
    let (bw, cr, preamble) = (125_000.0, 1.0, 8.0);
    let t_sym = f64::from(1u32 << sf) / bw * 1000.0;
    let de = if t_sym > 16.0 { 1.0 } else { 0.0 };
    let sf = f64::from(sf);
    let numerator = 8.0 * payload as f64 - 4.0 * sf + 28.0 + 16.0;
    let payload_symbols =
        8.0 + ((numerator / (4.0 * (sf - 2.0 * de))).ceil() * (cr + 4.0)).max(0.0);
    (preamble + 4.25) * t_sym + payload_symbols * t_sym
}

fn c9_airtime() -> Check {
    let golden: [(u8, [f64; 6]); 6] = [
        (7, [25.856, 30.976, 30.976, 36.096, 92.416, 97.536]),
        (8, [51.712, 51.712, 61.952, 61.952, 164.352, 174.592]),
        (9, [103.424, 103.424, 123.904, 123.904, 287.744, 308.224]),
        (10, [206.848, 206.848, 206.848, 247.808, 534.528, 575.488]),
        (11, [413.696, 413.696, 413.696, 495.616, 1150.976, 1232.896]),
        (12, [827.392, 827.392, 827.392, 991.232, 2138.112, 2301.952]),
    ];
    let mut worst: f64 = 0.0;
    let mut previous_sf: Option<Vec<f64>> = None;
    for sf in 7..=12u8 {
        let params = LoraParams::eu868_defaults(sf);
        let mut row = Vec::new();
        for payload in 1..=60 {
            let toa = lora_time_on_air(&params, payload).map_err(err)?;
            let delta = (toa - oracle_toa_ms(u32::from(sf), payload)).abs();
            worst = worst.max(delta);
            ensure!(delta <= 0.01, "SF{sf}, {payload} octets: off by {delta} ms");
            if let Some(&last) = row.last() {
                ensure!(toa >= last, "SF{sf}: airtime drops at {payload} octets");
            }
            row.push(toa);
        }
        if let Some(prev) = &previous_sf {
            ensure!(
                row.iter().zip(prev).all(|(a, b)| a > b),
                "SF{sf} is not slower than SF{}",
                sf - 1
            );
        }
        previous_sf = Some(row);
    }
    for (sf, values) in golden {
        let params = LoraParams::eu868_defaults(sf);
        for (payload, want) in [1, 2, 4, 6, 44, 48].into_iter().zip(values) {
            let got = lora_time_on_air(&params, payload).map_err(err)?;
            ensure!(
                (got - want).abs() <= 0.01,
                "SF{sf}, {payload} octets: {got} vs frozen {want}"
            );
        }
    }
    Ok(format!(
        "SF7-12 x 1-60 octets within {worst:.6} ms of the oracle"
    ))
}

fn c10_registry() -> Check {
    let mut registry = RuleRegistry::new();
    let devices = [
        (DeviceAddress(vec![0x00, 0x12, 0x74, 0x01]), SENDER_IID),
        (
            DeviceAddress(vec![0x00, 0x12, 0x74, 0x02]),
            0x0212_7401_0001_0202,
        ),
    ];
    let rule = figure3_rule(0);
    let first = registry
        .register_rule(StoredRule::from(&rule))
        .map_err(err)?;
    let second = registry
        .register_rule(StoredRule::from(&rule))
        .map_err(err)?;
    ensure!(first == second, "long IDs {first} and {second}");
    ensure!(
        registry.rule_count() == 1,
        "{} stored rules",
        registry.rule_count()
    );

    for (address, iid) in &devices {
        let (device_ctx, slots) = registry
            .provision_device(address, &[first], RuleIdLayout::default())
            .map_err(err)?;
        ensure!(
            slots.get(&RuleSlot::Flat(0)) == Some(&first),
            "short ID 0 not mapped"
        );
        let resolved = registry.resolve(address, RuleSlot::Flat(0)).map_err(err)?;
        ensure!(
            resolved.fields() == rule.fields.as_slice(),
            "resolved rule differs"
        );

        let mut stack = reference_packet(REFERENCE_PORT);
        stack.network.src_iid = *iid;
        stack.fill_checksum();
        let wire = compress(&device_ctx, &stack).map_err(err)?.to_bytes();
        ensure!(
            wire.len() == 1 + stack.payload.len(),
            "device {address}: {} octets",
            wire.len()
        );
        let view = registry.device_view(address).map_err(err)?;
        let env = DecompressionEnvironment::new(*iid, Direction::Up);
        let back = decompress_with(&wire, &view, &env).map_err(err)?;
        ensure!(
            bytes(&back)? == bytes(&stack)?,
            "device {address}: network side rebuilt a different packet"
        );
    }
    Ok(format!(
        "2 devices share long ID {first}; both packets rebuilt exactly"
    ))
}

fn c11_weighted_mean() -> Check {
    let report = BenchmarkScenario::default()
        .run(Mode::Layered)
        .map_err(err)?;
    let mean = report.weighted_mean;
    ensure!((1.0..=2.0).contains(&mean), "weighted mean {mean}");
    ensure!(
        (mean - 1.4570675).abs() < 1e-6,
        "weighted mean {mean} differs from (358.33 x 1 + 301.66 x 2) / 659.99"
    );
    Ok(format!(
        "computed {mean:.4} octets/packet; reported reference {REPORTED_SCHC_AVERAGE} (SCHC), {REPORTED_IPHC_AVERAGE} (IPHC)"
    ))
}

fn main() -> ExitCode {
    let checks: [Criterion; 11] = [
        (
            "1 IPv6/UDP headers 48 -> 1 octet",
            c1_one_octet_udp,
            Some(Duration::from_secs(1)),
        ),
        (
            "2 IPv6/ICMPv6 headers 44 -> 2 octets",
            c2_two_octet_icmpv6,
            Some(Duration::from_secs(1)),
        ),
        (
            "3 unmatched packets use rule ID 31",
            c3_uncompressed_framing,
            None,
        ),
        (
            "4 decompress(compress(p)) == p",
            c4_round_trips,
            Some(Duration::from_secs(60)),
        ),
        (
            "5 layered and flattened contexts agree",
            c5_flat_layered_equivalence,
            None,
        ),
        (
            "6 network-only match still compresses",
            c6_network_only_match,
            None,
        ),
        (
            "7 flat rule selection is optimal",
            c7_selection_optimality,
            None,
        ),
        (
            "8 compression factors 48 / 22 / 22",
            c8_compression_factors,
            None,
        ),
        ("9 LoRa airtime matches the oracle", c9_airtime, None),
        ("10 registry dedup and resolution", c10_registry, None),
        ("11 weighted mean of the flow mix", c11_weighted_mean, None),
    ];
    let mut failed = 0;
    for (name, check, limit) in checks {
        let start = Instant::now();
        let outcome =
            catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(limit)) if elapsed > limit => {
                Err(format!("took {elapsed:.2?}, limit {limit:?}"))
            }
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{elapsed:.2?}]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
