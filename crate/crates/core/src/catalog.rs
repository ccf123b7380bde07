//! Built-in rule sets: the reference IPv6/UDP rule, the two-port shared
//! IPv6 example, and the three RPL/UDP benchmark flows.

use crate::context::{
    CdAction, DirectionIndicator, FieldDescriptor, FlatContext, FlatRule, LayerRule,
    LayeredContext, RuleIdLayout,
};
use crate::packet::{FieldId, Layer, NEXT_HEADER_ICMPV6, NEXT_HEADER_UDP};

use DirectionIndicator::{Bidirectional as Bi, Up};
use FieldId::*;

/// "Alpha::/64" of the reference rule.
pub const ALPHA_PREFIX: u64 = 0x2001_0db8_000a_0000;
/// "Beta::/64" of the reference rule.
pub const BETA_PREFIX: u64 = 0x2001_0db8_000b_0000;
pub const REFERENCE_DST_IID: u64 = 0x1000;
pub const REFERENCE_PORT: u16 = 5683;

pub const LINK_LOCAL_PREFIX: u64 = 0xfe80_0000_0000_0000;
pub const LINK_LOCAL_MULTICAST_PREFIX: u64 = 0xff02_0000_0000_0000;
/// ff02::1a, the all-RPL-nodes group.
pub const ALL_RPL_NODES_IID: u64 = 0x1a;
pub const GLOBAL_PREFIX: u64 = 0xaaaa_0000_0000_0000;
pub const SENDER_IID: u64 = 0x0212_7401_0001_0101;
pub const RECEIVER_IID: u64 = 0x0212_7402_0002_0202;
pub const CLIENT_PORT: u16 = 8765;
pub const SERVER_PORT: u16 = 5678;
pub const ICMPV6_RPL_TYPE: u8 = 155;

fn ipv6_fields(
    next_header: u8,
    hop_limit: u8,
    src_prefix: u64,
    dst_prefix: u64,
    dst_iid: u64,
) -> Vec<FieldDescriptor> {
    vec![
        FieldDescriptor::equal(Ipv6Version, Bi, 6),
        FieldDescriptor::equal(Ipv6TrafficClass, Bi, 0),
        FieldDescriptor::equal(Ipv6FlowLabel, Bi, 0),
        FieldDescriptor::ignore(Ipv6PayloadLength, Bi, CdAction::CompLength),
        FieldDescriptor::equal(Ipv6NextHeader, Bi, next_header.into()),
        FieldDescriptor::equal(Ipv6HopLimit, Bi, hop_limit.into()),
        FieldDescriptor::equal(Ipv6SrcPrefix, Up, src_prefix),
        FieldDescriptor::ignore(Ipv6SrcIid, Up, CdAction::DevIidFromDeviceId),
        FieldDescriptor::equal(Ipv6DstPrefix, Up, dst_prefix),
        FieldDescriptor::equal(Ipv6DstIid, Up, dst_iid),
    ]
}

fn udp_fields(src_port: u16, dst_port: u16) -> Vec<FieldDescriptor> {
    vec![
        FieldDescriptor::equal(UdpSrcPort, Bi, src_port.into()),
        FieldDescriptor::equal(UdpDstPort, Bi, dst_port.into()),
        FieldDescriptor::ignore(UdpLength, Bi, CdAction::CompLength),
        FieldDescriptor::ignore(UdpChecksum, Bi, CdAction::CompChecksum),
    ]
}

/// RPL control messages: fixed type, code carried in-line, checksum recomputed.
fn rpl_icmpv6_fields() -> Vec<FieldDescriptor> {
    vec![
        FieldDescriptor::equal(Icmpv6Type, Bi, ICMPV6_RPL_TYPE.into()),
        FieldDescriptor::ignore(Icmpv6Code, Bi, CdAction::ValueSent),
        FieldDescriptor::ignore(Icmpv6Checksum, Bi, CdAction::CompChecksum),
    ]
}

/// IPv6 part of the reference rule (10 descriptors).
pub fn ipv6_rule(local_id: u32) -> LayerRule {
    LayerRule {
        local_id,
        layer: Layer::Network,
        fields: ipv6_fields(
            NEXT_HEADER_UDP,
            255,
            ALPHA_PREFIX,
            BETA_PREFIX,
            REFERENCE_DST_IID,
        ),
    }
}

/// UDP rule with both ports fixed to `port` (4 descriptors).
pub fn udp_port_rule(local_id: u32, port: u16) -> LayerRule {
    LayerRule {
        local_id,
        layer: Layer::Transport,
        fields: udp_fields(port, port),
    }
}

/// The reference IPv6/UDP rule: 14 descriptors, all elided.
pub fn figure3_rule(rule_id: u32) -> FlatRule {
    let mut fields = ipv6_rule(0).fields;
    fields.extend(udp_port_rule(0, REFERENCE_PORT).fields);
    FlatRule { rule_id, fields }
}

/// Two IPv6/UDP flows to one host on ports 5683 and 5230, one rule each.
pub fn shared_ipv6_flat() -> FlatContext {
    let rule = |rule_id, port| {
        let mut fields = ipv6_rule(0).fields;
        fields.extend(udp_port_rule(0, port).fields);
        FlatRule { rule_id, fields }
    };
    FlatContext::new(vec![rule(1, 5683), rule(2, 5230)], RuleIdLayout::default())
}

/// The same two flows with a single shared IPv6 rule.
pub fn shared_ipv6_layered() -> LayeredContext {
    let mut ctx = LayeredContext::new(RuleIdLayout::default());
    ctx.push(ipv6_rule(1));
    ctx.push(udp_port_rule(1, 5683));
    ctx.push(udp_port_rule(2, 5230));
    ctx
}

/// IPv6 rules of the benchmark flows, in flow order (a), (b), (c).
fn benchmark_ipv6_rules() -> [Vec<FieldDescriptor>; 3] {
    [
        ipv6_fields(
            NEXT_HEADER_ICMPV6,
            255,
            LINK_LOCAL_PREFIX,
            LINK_LOCAL_MULTICAST_PREFIX,
            ALL_RPL_NODES_IID,
        ),
        ipv6_fields(
            NEXT_HEADER_ICMPV6,
            255,
            LINK_LOCAL_PREFIX,
            LINK_LOCAL_PREFIX,
            RECEIVER_IID,
        ),
        ipv6_fields(
            NEXT_HEADER_UDP,
            64,
            GLOBAL_PREFIX,
            GLOBAL_PREFIX,
            RECEIVER_IID,
        ),
    ]
}

/// One flat rule per benchmark flow: IDs 0, 1, 2 for flows (a), (b), (c).
pub fn benchmark_flat_context() -> FlatContext {
    let [a, b, c] = benchmark_ipv6_rules();
    let rules = [
        (a, rpl_icmpv6_fields()),
        (b, rpl_icmpv6_fields()),
        (c, udp_fields(CLIENT_PORT, SERVER_PORT)),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, (mut ip, upper))| {
        ip.extend(upper);
        FlatRule {
            rule_id: i as u32,
            fields: ip,
        }
    })
    .collect();
    FlatContext::new(rules, RuleIdLayout::default())
}

/// Layered form of the benchmark context: three IPv6 rules, and a single
/// ICMPv6 rule shared by the two RPL flows next to the UDP rule.
pub fn benchmark_layered_context() -> LayeredContext {
    let mut ctx = LayeredContext::new(RuleIdLayout::default());
    for (i, fields) in benchmark_ipv6_rules().into_iter().enumerate() {
        ctx.push(LayerRule {
            local_id: i as u32,
            layer: Layer::Network,
            fields,
        });
    }
    ctx.push(LayerRule {
        local_id: 0,
        layer: Layer::Transport,
        fields: rpl_icmpv6_fields(),
    });
    ctx.push(LayerRule {
        local_id: 1,
        layer: Layer::Transport,
        fields: udp_fields(CLIENT_PORT, SERVER_PORT),
    });
    ctx
}
