//! Random packets and contexts shared by the integration tests.

#![allow(dead_code)]

use lschc::catalog::{GLOBAL_PREFIX, LINK_LOCAL_PREFIX, RECEIVER_IID};
use lschc::context::{
    CdAction, DirectionIndicator, FieldDescriptor, FlatContext, FlatRule, LayerRule,
    LayeredContext, RuleIdLayout,
};
use lschc::packet::{
    get_field, parse_stack, serialize_stack, CoapHeader, Direction, HeaderKind, HeaderStack,
    Icmpv6Header, Ipv6Header, Layer, Transport, UdpHeader, COAP_PORT, NEXT_HEADER_ICMPV6,
    NEXT_HEADER_UDP,
};
use rand::seq::SliceRandom;
use rand::Rng;

const PREFIXES: [u64; 4] = [
    0x2001_0db8_000a_0000,
    0x2001_0db8_000b_0000,
    LINK_LOCAL_PREFIX,
    GLOBAL_PREFIX,
];
const IIDS: [u64; 3] = [0x1000, 0x1, RECEIVER_IID];
const PORTS: [u16; 4] = [COAP_PORT, 5230, 8765, 5678];

/// A wider layout with room for more rules per layer.
pub fn wide_layout() -> RuleIdLayout {
    RuleIdLayout {
        total_rule_bits: 8,
        alc_bits: 2,
        tlc_bits: 3,
        nlc_bits: 3,
        ..RuleIdLayout::default()
    }
}

fn pick<T: Copy, R: Rng>(rng: &mut R, pool: &[T], fresh: impl FnOnce(&mut R) -> T) -> T {
    if rng.gen_bool(0.8) {
        *pool.choose(rng).expect("non-empty pool")
    } else {
        fresh(rng)
    }
}

fn random_udp<R: Rng>(rng: &mut R, coap: bool) -> UdpHeader {
    let mut src_port = pick(rng, &PORTS, |r| r.gen());
    let mut dst_port = pick(rng, &PORTS, |r| r.gen());
    if coap && src_port != COAP_PORT && dst_port != COAP_PORT {
        dst_port = COAP_PORT;
    }
    if !coap && (src_port == COAP_PORT || dst_port == COAP_PORT) {
        src_port = 8765;
        dst_port = 5678;
    }
    UdpHeader {
        src_port,
        dst_port,
        length: 0,
        checksum: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Bare,
    Udp,
    Coap,
    Icmpv6,
}

pub fn random_shape(rng: &mut impl Rng) -> Shape {
    *[
        Shape::Bare,
        Shape::Udp,
        Shape::Udp,
        Shape::Coap,
        Shape::Icmpv6,
        Shape::Icmpv6,
    ]
    .choose(rng)
    .unwrap()
}

/// A well-formed packet of the given shape, parsed back from its bytes.
///
/// The device-side address (source upstream, destination downstream)
/// always carries `device_iid`.
pub fn random_packet(
    rng: &mut impl Rng,
    shape: Shape,
    direction: Direction,
    device_iid: u64,
) -> HeaderStack {
    let mut network = Ipv6Header {
        traffic_class: if rng.gen_bool(0.7) { 0 } else { rng.gen() },
        flow_label: if rng.gen_bool(0.7) {
            0
        } else {
            rng.gen_range(0..1 << 20)
        },
        hop_limit: *[64u8, 255, rng.gen()].choose(rng).unwrap(),
        src_prefix: pick(rng, &PREFIXES, |r| r.gen()),
        src_iid: pick(rng, &IIDS, |r| r.gen()),
        dst_prefix: pick(rng, &PREFIXES, |r| r.gen()),
        dst_iid: pick(rng, &IIDS, |r| r.gen()),
        ..Ipv6Header::default()
    };
    match direction {
        Direction::Up => network.src_iid = device_iid,
        Direction::Down => network.dst_iid = device_iid,
    }
    let payload_len = rng.gen_range(0..24);
    let payload: Vec<u8> = (0..payload_len).map(|_| rng.gen()).collect();
    let (transport, application) = match shape {
        Shape::Bare => {
            network.next_header = *[59u8, 6, 43].choose(rng).unwrap();
            (None, None)
        }
        Shape::Udp => {
            network.next_header = NEXT_HEADER_UDP;
            (Some(Transport::Udp(random_udp(rng, false))), None)
        }
        Shape::Coap => {
            network.next_header = NEXT_HEADER_UDP;
            let coap = CoapHeader {
                version: 1,
                msg_type: rng.gen_range(0..4),
                token_length: rng.gen_range(0..=8),
                code: *[0x01u8, 0x02, 0x45, rng.gen()].choose(rng).unwrap(),
                message_id: rng.gen(),
            };
            (Some(Transport::Udp(random_udp(rng, true))), Some(coap))
        }
        Shape::Icmpv6 => {
            network.next_header = NEXT_HEADER_ICMPV6;
            let msg_type = *[155u8, 128, 129, rng.gen()].choose(rng).unwrap();
            let code = if rng.gen_bool(0.5) { 0 } else { rng.gen() };
            (
                Some(Transport::Icmpv6(Icmpv6Header {
                    msg_type,
                    code,
                    checksum: 0,
                })),
                None,
            )
        }
    };
    let mut stack = HeaderStack {
        network,
        transport,
        application,
        payload,
        direction,
    };
    stack.refresh_lengths();
    stack.fill_checksum();
    let bytes = serialize_stack(&stack).expect("generated stack serializes");
    parse_stack(&bytes, direction).expect("generated bytes parse")
}

/// Header kinds present in the stack, in chain order.
pub fn kinds(stack: &HeaderStack) -> Vec<HeaderKind> {
    Layer::ALL.iter().filter_map(|&l| stack.header(l)).collect()
}

/// Descriptors for `kinds` that all match `stack`, with random actions.
pub fn matching_fields(
    rng: &mut impl Rng,
    stack: &HeaderStack,
    kinds: &[HeaderKind],
) -> Vec<FieldDescriptor> {
    use lschc::packet::FieldId::{Ipv6DstIid, Ipv6SrcIid};
    let own = match stack.direction {
        Direction::Up => (Ipv6SrcIid, DirectionIndicator::Up),
        Direction::Down => (Ipv6DstIid, DirectionIndicator::Down),
    };
    let mut out = Vec::new();
    for kind in kinds {
        for &f in kind.fields() {
            let value = get_field(stack, f, 0).expect("field present").value();
            let dir = if rng.gen_bool(0.8) {
                DirectionIndicator::Bidirectional
            } else {
                own.1
            };
            let roll = rng.gen_range(0..10);
            let d = if f.is_length() && roll < 7 {
                FieldDescriptor::ignore(f, dir, CdAction::CompLength)
            } else if f.is_checksum() && roll < 7 {
                FieldDescriptor::ignore(f, dir, CdAction::CompChecksum)
            } else if f == own.0 && roll < 5 {
                FieldDescriptor::ignore(f, own.1, CdAction::DevIidFromDeviceId)
            } else if roll < 6 || f.is_length() || f.is_checksum() {
                if rng.gen_bool(0.7) {
                    FieldDescriptor::equal(f, dir, value)
                } else {
                    FieldDescriptor::ignore(f, dir, CdAction::ValueSent)
                }
            } else {
                FieldDescriptor::ignore(f, dir, CdAction::ValueSent)
            };
            out.push(d);
        }
    }
    out
}

/// Flat context with one rule derived from `stack` (so the packet always
/// has a match) and the rest from unrelated packets, under shuffled IDs.
pub fn flat_context_for(
    rng: &mut impl Rng,
    stack: &HeaderStack,
    device_iid: u64,
    rule_count: usize,
    layout: RuleIdLayout,
) -> FlatContext {
    let usable = layout.reserved_flat() as usize;
    let mut ids: Vec<u32> = (0..usable as u32).collect();
    ids.shuffle(rng);
    let mut rules = Vec::new();
    for (i, &rule_id) in ids.iter().take(rule_count.clamp(1, usable)).enumerate() {
        let source = if i == 0 {
            stack.clone()
        } else {
            let shape = random_shape(rng);
            random_packet(rng, shape, stack.direction, device_iid)
        };
        let all = kinds(&source);
        let depth = rng.gen_range(1..=all.len());
        rules.push(FlatRule {
            rule_id,
            fields: matching_fields(rng, &source, &all[..depth]),
        });
    }
    rules.shuffle(rng);
    FlatContext::new(rules, layout)
}

fn layer_rules(rng: &mut impl Rng, stack: &HeaderStack) -> Vec<LayerRule> {
    kinds(stack)
        .into_iter()
        .map(|k| LayerRule {
            local_id: 0,
            layer: k.layer(),
            fields: matching_fields(rng, stack, &[k]),
        })
        .collect()
}

/// Adds `rule` under the next free local ID unless an identical body exists.
/// Returns false when the layer segment is full.
pub fn push_layer_rule(ctx: &mut LayeredContext, mut rule: LayerRule) -> bool {
    if ctx
        .rules(rule.layer)
        .iter()
        .any(|r| r.fields == rule.fields)
    {
        return true;
    }
    let next = ctx.rules(rule.layer).len() as u32;
    if next >= ctx.layout.reserved_segment(rule.layer) {
        return false;
    }
    rule.local_id = next;
    ctx.push(rule);
    true
}

/// Layered context holding per-layer rules for `stack` (some layers may be
/// left out when `partial`) next to rules from unrelated packets.
pub fn layered_context_for(
    rng: &mut impl Rng,
    stack: &HeaderStack,
    device_iid: u64,
    decoys: usize,
    partial: bool,
    layout: RuleIdLayout,
) -> LayeredContext {
    let mut ctx = LayeredContext::new(layout);
    let mut pending: Vec<LayerRule> = Vec::new();
    for _ in 0..decoys {
        let shape = random_shape(rng);
        let p = random_packet(rng, shape, stack.direction, device_iid);
        pending.extend(layer_rules(rng, &p));
    }
    let own: Vec<LayerRule> = layer_rules(rng, stack)
        .into_iter()
        .filter(|_| !partial || rng.gen_bool(0.6))
        .collect();
    let at = rng.gen_range(0..=pending.len());
    for (offset, r) in own.into_iter().enumerate() {
        pending.insert((at + offset).min(pending.len()), r);
    }
    for r in pending {
        push_layer_rule(&mut ctx, r);
    }
    ctx
}
