//! Rule matching, best-rule selection, and the compressed wire format.
//!
//! A compressed packet is laid out as
//!
//! ```text
//! dispatch | rule ID | residue | zero padding to an octet | raw headers | payload
//! ```
//!
//! The residue holds, in descriptor order and layer order, the in-line
//! (`value-sent`) field values of every compressed layer. A layer that is
//! not compressed but sits below a compressed one is copied into the
//! residue as raw header octets. Uncompressed layers above the last
//! compressed one (all layers, for the reserved rule ID) are copied
//! octet-aligned after the padding, so the decompressor can re-parse them
//! together with the payload.

use bitvec::prelude::*;
use thiserror::Error;

use crate::bits::{push_octets, BitBuf, BitCursor, Bits};
use crate::context::{
    header_runs, CdAction, Context, FieldDescriptor, FlatContext, LayeredContext, MatchingOperator,
    Mode, RuleIdError, RuleIdLayout, RuleRef, SegmentIds, Violation,
};
use crate::packet::{
    get_field, parse_stack, ChecksumLayer, CoapHeader, Direction, FieldId, HeaderKind, HeaderStack,
    Icmpv6Header, Ipv6Header, Layer, PacketError, Transport, UdpHeader, IPV6_HEADER_LEN,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("context is invalid ({} violations), first: {}", .0.len(), .0[0])]
    ContextInvalid(Vec<Violation>),
    #[error("{field} value is {got} bits wide, expected {expected}")]
    WidthMismatch {
        field: FieldId,
        expected: u8,
        got: u8,
    },
    #[error("dispatch {found} does not match the configured {expected}")]
    BadDispatch { expected: Bits, found: Bits },
    #[error("compressed packet shorter than its dispatch and rule ID")]
    TruncatedPrefix,
    #[error("{0} is not in the context")]
    UnknownRuleId(RuleRef),
    #[error("residue underflow: {needed} more bits needed for {what}, {available} left")]
    ResidueUnderflow {
        what: String,
        needed: usize,
        available: usize,
    },
    #[error("frame is {available} octets but the lower layer announced {announced}")]
    ShortFrame { announced: usize, available: usize },
    #[error("rule field {0} has no target value to restore")]
    MissingTarget(FieldId),
    #[error("reconstructed header chain is inconsistent: {0}")]
    Inconsistent(&'static str),
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error(transparent)]
    RuleId(#[from] RuleIdError),
}

/// Out-of-band inputs the decompressor needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecompressionEnvironment {
    /// IID derived from the device's link-layer identifier.
    pub device_iid: u64,
    pub direction: Direction,
    /// Frame length signalled by the lower layer; `None` trusts the buffer length.
    pub l2_payload_length: Option<usize>,
}

impl DecompressionEnvironment {
    pub fn new(device_iid: u64, direction: Direction) -> Self {
        Self {
            device_iid,
            direction,
            l2_payload_length: None,
        }
    }
}

/// Rule storage the decompressor can resolve rule IDs against.
pub trait RuleLookup {
    fn layout(&self) -> &RuleIdLayout;
    fn mode(&self) -> Mode;
    fn flat_fields(&self, rule_id: u32) -> Option<&[FieldDescriptor]>;
    fn layer_fields(&self, layer: Layer, local_id: u32) -> Option<&[FieldDescriptor]>;
}

impl RuleLookup for FlatContext {
    fn layout(&self) -> &RuleIdLayout {
        &self.layout
    }

    fn mode(&self) -> Mode {
        Mode::Flat
    }

    fn flat_fields(&self, rule_id: u32) -> Option<&[FieldDescriptor]> {
        self.rule(rule_id).map(|r| r.fields.as_slice())
    }

    fn layer_fields(&self, _: Layer, _: u32) -> Option<&[FieldDescriptor]> {
        None
    }
}

impl RuleLookup for LayeredContext {
    fn layout(&self) -> &RuleIdLayout {
        &self.layout
    }

    fn mode(&self) -> Mode {
        Mode::Layered
    }

    fn flat_fields(&self, _: u32) -> Option<&[FieldDescriptor]> {
        None
    }

    fn layer_fields(&self, layer: Layer, local_id: u32) -> Option<&[FieldDescriptor]> {
        self.rule(layer, local_id).map(|r| r.fields.as_slice())
    }
}

impl RuleLookup for Context {
    fn layout(&self) -> &RuleIdLayout {
        Context::layout(self)
    }

    fn mode(&self) -> Mode {
        Context::mode(self)
    }

    fn flat_fields(&self, rule_id: u32) -> Option<&[FieldDescriptor]> {
        match self {
            Context::Flat(c) => c.flat_fields(rule_id),
            Context::Layered(_) => None,
        }
    }

    fn layer_fields(&self, layer: Layer, local_id: u32) -> Option<&[FieldDescriptor]> {
        match self {
            Context::Flat(_) => None,
            Context::Layered(c) => c.layer_fields(layer, local_id),
        }
    }
}

/// Checks one packet field against a descriptor.
///
/// A descriptor whose direction indicator excludes `direction` never matches.
pub fn match_field(
    desc: &FieldDescriptor,
    value: Bits,
    direction: Direction,
) -> Result<bool, EngineError> {
    let expected = desc.field_id.width();
    if value.width() != expected {
        return Err(EngineError::WidthMismatch {
            field: desc.field_id,
            expected,
            got: value.width(),
        });
    }
    if !desc.direction.applies_to(direction) {
        return Ok(false);
    }
    Ok(match desc.matching_operator {
        MatchingOperator::Equal => desc.target_bits() == Some(value),
        MatchingOperator::Ignore => true,
    })
}

/// True when every descriptor's field is present in the stack and matches.
pub fn match_rule<R: AsRef<[FieldDescriptor]> + ?Sized>(rule: &R, stack: &HeaderStack) -> bool {
    rule.as_ref().iter().all(|d| {
        get_field(stack, d.field_id, d.position)
            .ok()
            .and_then(|v| match_field(d, v, stack.direction).ok())
            .unwrap_or(false)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlatSelection {
    pub rule_id: u32,
    /// In-line bits of the rule's `value-sent` fields.
    pub residue_bits: usize,
    /// Header octets the rule does not cover, sent uncompressed.
    pub raw_octets: usize,
}

impl FlatSelection {
    /// Compressed header bits after the rule ID.
    pub fn cost_bits(&self) -> usize {
        self.residue_bits + 8 * self.raw_octets
    }
}

/// Octets of the stack's headers beyond the first `covered` layers.
fn uncovered_octets(stack: &HeaderStack, covered: usize) -> usize {
    stack_layers(stack)
        .skip(covered)
        .filter_map(|l| stack.header(l))
        .map(HeaderKind::len)
        .sum()
}

/// Best matching flat rule: fewest compressed header bits (residue plus any
/// uncovered headers), then lowest rule ID. `None` means the packet must go
/// out under the reserved ID.
pub fn select_rule_flat(ctx: &FlatContext, stack: &HeaderStack) -> Option<FlatSelection> {
    ctx.rules
        .iter()
        .filter(|r| match_rule(*r, stack))
        .map(|r| FlatSelection {
            rule_id: r.rule_id,
            residue_bits: r.residue_bits(),
            raw_octets: uncovered_octets(stack, r.header_kinds().len()),
        })
        .min_by_key(|s| (s.cost_bits(), s.rule_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerChoice {
    pub local_id: u32,
    pub residue_bits: usize,
}

/// Per-layer rule choice; `None` stands for the reserved "uncompressed" segment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayeredSelection {
    pub nlc: Option<LayerChoice>,
    pub tlc: Option<LayerChoice>,
    pub alc: Option<LayerChoice>,
}

impl LayeredSelection {
    pub fn get(&self, layer: Layer) -> Option<LayerChoice> {
        match layer {
            Layer::Network => self.nlc,
            Layer::Transport => self.tlc,
            Layer::Application => self.alc,
        }
    }

    pub fn segment_ids(&self, layout: &RuleIdLayout) -> SegmentIds {
        let id = |l| {
            self.get(l)
                .map_or(layout.reserved_segment(l), |c| c.local_id)
        };
        SegmentIds {
            alc: id(Layer::Application),
            tlc: id(Layer::Transport),
            nlc: id(Layer::Network),
        }
    }

    /// Highest layer that has a rule.
    pub fn last_compressed(&self) -> Option<Layer> {
        Layer::ALL
            .into_iter()
            .rev()
            .find(|&l| self.get(l).is_some())
    }
}

/// Picks the best rule independently for each layer present in the stack.
pub fn select_rule_layered(ctx: &LayeredContext, stack: &HeaderStack) -> LayeredSelection {
    let best = |layer: Layer| {
        stack.header(layer)?;
        ctx.rules(layer)
            .iter()
            .filter(|r| match_rule(*r, stack))
            .map(|r| LayerChoice {
                local_id: r.local_id,
                residue_bits: r.residue_bits(),
            })
            .min_by_key(|c| (c.residue_bits, c.local_id))
    };
    LayeredSelection {
        nlc: best(Layer::Network),
        tlc: best(Layer::Transport),
        alc: best(Layer::Application),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedPacket {
    pub dispatch: Bits,
    pub rule_id: Bits,
    pub residue: BitBuf,
    /// Uncompressed headers above the last compressed layer, octet-aligned.
    pub raw_headers: Vec<u8>,
    pub payload: Vec<u8>,
}

impl CompressedPacket {
    pub fn bit_prefix_len(&self) -> usize {
        usize::from(self.dispatch.width()) + usize::from(self.rule_id.width()) + self.residue.len()
    }

    /// Compressed header size in octets, payload excluded.
    pub fn header_octets(&self) -> usize {
        self.bit_prefix_len().div_ceil(8) + self.raw_headers.len()
    }

    pub fn total_octets(&self) -> usize {
        self.header_octets() + self.payload.len()
    }

    pub fn residue_bits(&self) -> usize {
        self.residue.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bits = BitBuf::with_capacity(self.bit_prefix_len() + 8);
        self.dispatch.push_to(&mut bits);
        self.rule_id.push_to(&mut bits);
        bits.extend_from_bitslice(&self.residue);
        bits.set_uninitialized(false);
        let mut out = bits.into_vec();
        out.extend_from_slice(&self.raw_headers);
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Header portion size in octets, payload excluded.
pub fn compressed_size_octets(pkt: &CompressedPacket) -> usize {
    pkt.header_octets()
}

fn push_residue(
    fields: &[FieldDescriptor],
    stack: &HeaderStack,
    residue: &mut BitBuf,
) -> Result<(), EngineError> {
    for d in fields.iter().filter(|d| d.cd_action == CdAction::ValueSent) {
        get_field(stack, d.field_id, d.position)?.push_to(residue);
    }
    Ok(())
}

fn stack_layers(stack: &HeaderStack) -> impl Iterator<Item = Layer> + '_ {
    Layer::ALL
        .into_iter()
        .filter(|&l| stack.header(l).is_some())
}

fn prepared(stack: &HeaderStack) -> Result<HeaderStack, EngineError> {
    stack.check_chain()?;
    let mut s = stack.clone();
    s.refresh_lengths();
    Ok(s)
}

fn ensure_valid(violations: Vec<Violation>) -> Result<(), EngineError> {
    if violations.is_empty() {
        Ok(())
    } else {
        Err(EngineError::ContextInvalid(violations))
    }
}

pub fn compress(ctx: &Context, stack: &HeaderStack) -> Result<CompressedPacket, EngineError> {
    match ctx {
        Context::Flat(c) => compress_flat(c, stack),
        Context::Layered(c) => compress_layered(c, stack),
    }
}

pub fn compress_flat(
    ctx: &FlatContext,
    stack: &HeaderStack,
) -> Result<CompressedPacket, EngineError> {
    ensure_valid(ctx.validate())?;
    let stack = prepared(stack)?;
    let layout = &ctx.layout;
    let mut residue = BitBuf::new();
    let mut raw_headers = Vec::new();

    let rule_id = match select_rule_flat(ctx, &stack) {
        None => {
            for layer in stack_layers(&stack) {
                raw_headers.extend(stack.layer_bytes(layer).unwrap_or_default());
            }
            layout.reserved_flat()
        }
        Some(sel) => {
            let rule = ctx.rule(sel.rule_id).expect("selected rule exists");
            push_residue(&rule.fields, &stack, &mut residue)?;
            let covered = rule.header_kinds().len();
            for layer in stack_layers(&stack).skip(covered) {
                raw_headers.extend(stack.layer_bytes(layer).unwrap_or_default());
            }
            sel.rule_id
        }
    };
    Ok(CompressedPacket {
        dispatch: layout.dispatch(),
        rule_id: Bits::truncating(u64::from(rule_id), layout.total_rule_bits),
        residue,
        raw_headers,
        payload: stack.payload.clone(),
    })
}

pub fn compress_layered(
    ctx: &LayeredContext,
    stack: &HeaderStack,
) -> Result<CompressedPacket, EngineError> {
    ensure_valid(ctx.validate())?;
    let stack = prepared(stack)?;
    let layout = &ctx.layout;
    let selection = select_rule_layered(ctx, &stack);
    let rule_id = layout.encode_rule_id(selection.segment_ids(layout))?;
    let last = selection.last_compressed();

    let mut residue = BitBuf::new();
    let mut raw_headers = Vec::new();
    for layer in stack_layers(&stack) {
        match selection.get(layer) {
            Some(choice) => {
                let rule = ctx
                    .rule(layer, choice.local_id)
                    .expect("selected rule exists");
                push_residue(&rule.fields, &stack, &mut residue)?;
            }
            None => {
                let raw = stack.layer_bytes(layer).unwrap_or_default();
                if last.is_some_and(|l| layer < l) {
                    push_octets(&mut residue, &raw);
                } else {
                    raw_headers.extend(raw);
                }
            }
        }
    }
    Ok(CompressedPacket {
        dispatch: layout.dispatch(),
        rule_id,
        residue,
        raw_headers,
        payload: stack.payload.clone(),
    })
}

/// Decompresses under a context, validating it first.
pub fn decompress(
    wire: &[u8],
    ctx: &Context,
    env: &DecompressionEnvironment,
) -> Result<HeaderStack, EngineError> {
    ensure_valid(ctx.validate())?;
    decompress_with(wire, ctx, env)
}

pub fn decompress_packet(
    pkt: &CompressedPacket,
    ctx: &Context,
    env: &DecompressionEnvironment,
) -> Result<HeaderStack, EngineError> {
    decompress(&pkt.to_bytes(), ctx, env)
}

/// Partially rebuilt headers plus the fields whose value depends on the
/// finished packet.
struct Rebuild {
    scratch: HeaderStack,
    comp_length: Vec<FieldId>,
    comp_checksum: Vec<ChecksumLayer>,
}

impl Rebuild {
    fn new(direction: Direction) -> Self {
        Self {
            scratch: HeaderStack {
                network: Ipv6Header::default(),
                transport: None,
                application: None,
                payload: Vec::new(),
                direction,
            },
            comp_length: Vec::new(),
            comp_checksum: Vec::new(),
        }
    }

    fn install_default(&mut self, kind: HeaderKind) {
        match kind {
            HeaderKind::Ipv6 => self.scratch.network = Ipv6Header::default(),
            HeaderKind::Udp => self.scratch.transport = Some(Transport::Udp(UdpHeader::default())),
            HeaderKind::Icmpv6 => {
                self.scratch.transport = Some(Transport::Icmpv6(Icmpv6Header::default()))
            }
            HeaderKind::Coap => self.scratch.application = Some(CoapHeader::default()),
        }
    }

    fn apply(
        &mut self,
        fields: &[FieldDescriptor],
        cursor: &mut BitCursor<'_>,
        env: &DecompressionEnvironment,
    ) -> Result<(), EngineError> {
        for (kind, run) in header_runs(fields) {
            self.install_default(kind);
            for d in run {
                let width = d.field_id.width();
                let value = match d.cd_action {
                    CdAction::NotSent => d
                        .target_bits()
                        .ok_or(EngineError::MissingTarget(d.field_id))?,
                    CdAction::ValueSent => {
                        let available = cursor.remaining();
                        cursor
                            .read(width)
                            .ok_or_else(|| EngineError::ResidueUnderflow {
                                what: d.field_id.to_string(),
                                needed: usize::from(width),
                                available,
                            })?
                    }
                    CdAction::CompLength => {
                        self.comp_length.push(d.field_id);
                        Bits::truncating(0, width)
                    }
                    CdAction::CompChecksum => {
                        self.comp_checksum.push(match d.field_id {
                            FieldId::Icmpv6Checksum => ChecksumLayer::Icmpv6,
                            _ => ChecksumLayer::Udp,
                        });
                        Bits::truncating(0, width)
                    }
                    CdAction::DevIidFromDeviceId => Bits::truncating(env.device_iid, width),
                };
                self.scratch.set_field(d.field_id, value)?;
            }
        }
        Ok(())
    }

    fn raw(&mut self, kind: HeaderKind, cursor: &mut BitCursor<'_>) -> Result<(), EngineError> {
        let available = cursor.remaining();
        let octets =
            cursor
                .read_octets(kind.len())
                .ok_or_else(|| EngineError::ResidueUnderflow {
                    what: format!("raw {kind} header"),
                    needed: kind.len() * 8,
                    available,
                })?;
        match kind {
            HeaderKind::Ipv6 => {
                self.scratch.network = Ipv6Header::from_bytes(octets.as_slice().try_into().unwrap())
            }
            HeaderKind::Udp => {
                self.scratch.transport = Some(Transport::Udp(UdpHeader::from_bytes(
                    octets.as_slice().try_into().unwrap(),
                )))
            }
            HeaderKind::Icmpv6 => {
                self.scratch.transport = Some(Transport::Icmpv6(Icmpv6Header::from_bytes(
                    octets.as_slice().try_into().unwrap(),
                )))
            }
            HeaderKind::Coap => {
                self.scratch.application = Some(CoapHeader::from_bytes(
                    octets.as_slice().try_into().unwrap(),
                ))
            }
        }
        Ok(())
    }

    fn finish(self, tail: &[u8], direction: Direction) -> Result<HeaderStack, EngineError> {
        let s = &self.scratch;
        if let Some(t) = &s.transport {
            if t.kind().next_header_value() != Some(s.network.next_header) {
                return Err(EngineError::Inconsistent(
                    "transport rule disagrees with next header",
                ));
            }
        }
        if s.application.is_some() && !matches!(s.transport, Some(Transport::Udp(_))) {
            return Err(EngineError::Inconsistent("application header without UDP"));
        }
        let mut bytes = s.network.to_bytes().to_vec();
        if let Some(t) = &s.transport {
            bytes.extend(t.to_bytes());
        }
        if let Some(a) = &s.application {
            bytes.extend(a.to_bytes());
        }
        bytes.extend_from_slice(tail);

        let upper = u16::try_from(bytes.len() - IPV6_HEADER_LEN)
            .map_err(|_| EngineError::Inconsistent("packet exceeds 65535 payload octets"))?
            .to_be_bytes();
        for field in &self.comp_length {
            let at = match field {
                FieldId::Ipv6PayloadLength => 4,
                _ => IPV6_HEADER_LEN + 4,
            };
            bytes[at..at + 2].copy_from_slice(&upper);
        }

        let mut stack = parse_stack(&bytes, direction)?;
        for layer in self.comp_checksum {
            let sum = crate::packet::compute_checksum(&stack, layer)?;
            stack.set_field(layer.field(), Bits::truncating(u64::from(sum), 16))?;
        }
        Ok(stack)
    }
}

/// Decompresses against any rule store without validating it.
pub fn decompress_with<L: RuleLookup + ?Sized>(
    wire: &[u8],
    lookup: &L,
    env: &DecompressionEnvironment,
) -> Result<HeaderStack, EngineError> {
    let wire = match env.l2_payload_length {
        Some(n) if n > wire.len() => {
            return Err(EngineError::ShortFrame {
                announced: n,
                available: wire.len(),
            })
        }
        Some(n) => &wire[..n],
        None => wire,
    };
    let layout = *lookup.layout();
    let bits = wire.view_bits::<Msb0>();
    let mut cursor = BitCursor::new(bits);
    let dispatch = cursor
        .read(layout.dispatch_bits)
        .ok_or(EngineError::TruncatedPrefix)?;
    if dispatch != layout.dispatch() {
        return Err(EngineError::BadDispatch {
            expected: layout.dispatch(),
            found: dispatch,
        });
    }
    let rule_id = cursor
        .read(layout.total_rule_bits)
        .ok_or(EngineError::TruncatedPrefix)?;

    let uncompressed = |mut cursor: BitCursor<'_>| {
        cursor.align();
        parse_stack(&wire[cursor.position() / 8..], env.direction).map_err(EngineError::from)
    };

    let mut rebuild = Rebuild::new(env.direction);
    match lookup.mode() {
        Mode::Flat => {
            let id = rule_id.value() as u32;
            if id == layout.reserved_flat() {
                return uncompressed(cursor);
            }
            let fields = lookup
                .flat_fields(id)
                .ok_or(EngineError::UnknownRuleId(RuleRef::Flat(id)))?;
            rebuild.apply(fields, &mut cursor, env)?;
        }
        Mode::Layered => {
            let ids = layout.decode_rule_id(rule_id)?;
            if layout.is_all_reserved(ids) {
                return uncompressed(cursor);
            }
            let compressed = |l: Layer| ids.get(l) != layout.reserved_segment(l);
            let last = Layer::ALL.into_iter().rev().find(|&l| compressed(l));
            for layer in Layer::ALL {
                if compressed(layer) {
                    let id = ids.get(layer);
                    let fields = lookup
                        .layer_fields(layer, id)
                        .ok_or(EngineError::UnknownRuleId(RuleRef::Layer(layer, id)))?;
                    if fields.first().map(|d| d.field_id.layer()) != Some(layer) {
                        return Err(EngineError::Inconsistent(
                            "layer rule targets another layer",
                        ));
                    }
                    rebuild.apply(fields, &mut cursor, env)?;
                } else if last.is_some_and(|l| layer < l) {
                    let kind = match layer {
                        Layer::Network => HeaderKind::Ipv6,
                        Layer::Transport => match rebuild.scratch.network.next_header {
                            crate::packet::NEXT_HEADER_UDP => HeaderKind::Udp,
                            _ => {
                                return Err(EngineError::Inconsistent(
                                    "application rule used above a non-UDP transport",
                                ))
                            }
                        },
                        Layer::Application => unreachable!("application is the top layer"),
                    };
                    rebuild.raw(kind, &mut cursor)?;
                }
            }
        }
    }
    cursor.align();
    let tail = &wire[cursor.position() / 8..];
    rebuild.finish(tail, env.direction)
}
