//! Compression contexts: field descriptors, flat rules, per-layer rules, and
//! the segmented rule-ID layout.
//!
//! A flat context holds rules spanning whole header chains. A layered
//! context keeps one rule set per layer (network, transport, application)
//! and identifies a packet's rules by packing one segment per layer into
//! the rule ID, application segment first.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::{mask, Bits};
use crate::packet::{Direction, FieldId, HeaderKind, Layer, COAP_PORT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchingOperator {
    Equal,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CdAction {
    /// Elided; restored from the target value.
    #[serde(rename = "not-sent")]
    NotSent,
    /// Carried in-line in the residue.
    #[serde(rename = "value-sent")]
    ValueSent,
    /// Elided; recomputed from the reconstructed packet size.
    #[serde(rename = "comp-length")]
    CompLength,
    /// Elided; recomputed over the reconstructed packet.
    #[serde(rename = "comp-check")]
    CompChecksum,
    /// Elided; the IID is derived from the device identifier.
    #[serde(rename = "deviid-did")]
    DevIidFromDeviceId,
}

impl fmt::Display for CdAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CdAction::NotSent => "not-sent",
            CdAction::ValueSent => "value-sent",
            CdAction::CompLength => "comp-length",
            CdAction::CompChecksum => "comp-check",
            CdAction::DevIidFromDeviceId => "deviid-did",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DirectionIndicator {
    #[serde(rename = "up")]
    Up,
    #[serde(rename = "down")]
    Down,
    #[serde(rename = "bi")]
    Bidirectional,
}

impl DirectionIndicator {
    pub fn applies_to(self, direction: Direction) -> bool {
        matches!(
            (self, direction),
            (DirectionIndicator::Bidirectional, _)
                | (DirectionIndicator::Up, Direction::Up)
                | (DirectionIndicator::Down, Direction::Down)
        )
    }
}

/// One row of a rule.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FieldDescriptor {
    pub field_id: FieldId,
    pub position: u8,
    pub direction: DirectionIndicator,
    pub target_value: Option<u64>,
    pub matching_operator: MatchingOperator,
    pub cd_action: CdAction,
}

impl FieldDescriptor {
    /// `equal` / `not-sent` row with the given target.
    pub fn equal(field_id: FieldId, direction: DirectionIndicator, target: u64) -> Self {
        Self {
            field_id,
            position: 0,
            direction,
            target_value: Some(target),
            matching_operator: MatchingOperator::Equal,
            cd_action: CdAction::NotSent,
        }
    }

    /// `ignore` row with the given action and no target.
    pub fn ignore(field_id: FieldId, direction: DirectionIndicator, cd_action: CdAction) -> Self {
        Self {
            field_id,
            position: 0,
            direction,
            target_value: None,
            matching_operator: MatchingOperator::Ignore,
            cd_action,
        }
    }

    /// Bits this row contributes to the compressed residue.
    pub fn residue_bits(&self) -> usize {
        match self.cd_action {
            CdAction::ValueSent => usize::from(self.field_id.width()),
            _ => 0,
        }
    }

    pub fn target_bits(&self) -> Option<Bits> {
        self.target_value
            .and_then(|v| Bits::new(v, self.field_id.width()))
    }

    fn violations(&self) -> Vec<ViolationKind> {
        let mut out = Vec::new();
        let f = self.field_id;
        if self.position != 0 {
            out.push(ViolationKind::PositionOutOfRange(self.position));
        }
        match (self.matching_operator, self.target_value) {
            (MatchingOperator::Equal, None) => out.push(ViolationKind::MissingTarget),
            (_, Some(v)) if Bits::new(v, f.width()).is_none() => {
                out.push(ViolationKind::TargetTooWide {
                    value: v,
                    width: f.width(),
                })
            }
            _ => {}
        }
        match self.cd_action {
            CdAction::NotSent if self.matching_operator != MatchingOperator::Equal => {
                out.push(ViolationKind::NotSentRequiresEqual)
            }
            a @ (CdAction::CompLength | CdAction::CompChecksum | CdAction::DevIidFromDeviceId)
                if self.matching_operator != MatchingOperator::Ignore =>
            {
                out.push(ViolationKind::ComputedActionRequiresIgnore(a))
            }
            _ => {}
        }
        let applicable = match self.cd_action {
            CdAction::CompLength => f.is_length(),
            CdAction::CompChecksum => f.is_checksum(),
            CdAction::DevIidFromDeviceId => f.is_iid(),
            CdAction::NotSent | CdAction::ValueSent => true,
        };
        if !applicable {
            out.push(ViolationKind::ActionNotApplicable(self.cd_action));
        }
        if self.cd_action == CdAction::DevIidFromDeviceId {
            let device_side = match f {
                FieldId::Ipv6SrcIid => Some(DirectionIndicator::Up),
                FieldId::Ipv6DstIid => Some(DirectionIndicator::Down),
                _ => None,
            };
            if device_side.is_some_and(|d| d != self.direction) {
                out.push(ViolationKind::DeviceIidDirection);
            }
        }
        out
    }
}

/// Rule for a single header layer of a layered context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRule {
    pub local_id: u32,
    pub layer: Layer,
    pub fields: Vec<FieldDescriptor>,
}

impl LayerRule {
    /// Header targeted by this rule, taken from its first descriptor.
    pub fn header_kind(&self) -> Option<HeaderKind> {
        self.fields.first().map(|d| d.field_id.header())
    }

    pub fn residue_bits(&self) -> usize {
        self.fields.iter().map(FieldDescriptor::residue_bits).sum()
    }
}

/// Rule spanning one or more consecutive layers, starting at the network layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatRule {
    pub rule_id: u32,
    pub fields: Vec<FieldDescriptor>,
}

impl FlatRule {
    pub fn header_kinds(&self) -> Vec<HeaderKind> {
        header_runs(&self.fields)
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    pub fn residue_bits(&self) -> usize {
        self.fields.iter().map(FieldDescriptor::residue_bits).sum()
    }
}

impl AsRef<[FieldDescriptor]> for LayerRule {
    fn as_ref(&self) -> &[FieldDescriptor] {
        &self.fields
    }
}

impl AsRef<[FieldDescriptor]> for FlatRule {
    fn as_ref(&self) -> &[FieldDescriptor] {
        &self.fields
    }
}

/// Splits descriptors into maximal runs targeting the same header.
pub(crate) fn header_runs(fields: &[FieldDescriptor]) -> Vec<(HeaderKind, &[FieldDescriptor])> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=fields.len() {
        if i == fields.len() || fields[i].field_id.header() != fields[start].field_id.header() {
            runs.push((fields[start].field_id.header(), &fields[start..i]));
            start = i;
        }
    }
    runs
}

/// Widths and reserved values of the dispatch and rule-ID prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuleIdLayout {
    pub dispatch_bits: u8,
    pub dispatch_value: u8,
    pub total_rule_bits: u8,
    pub alc_bits: u8,
    pub tlc_bits: u8,
    pub nlc_bits: u8,
}

impl Default for RuleIdLayout {
    fn default() -> Self {
        Self {
            dispatch_bits: 3,
            dispatch_value: 0b101,
            total_rule_bits: 5,
            alc_bits: 1,
            tlc_bits: 2,
            nlc_bits: 2,
        }
    }
}

/// Per-layer rule IDs packed into a layered rule ID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SegmentIds {
    pub alc: u32,
    pub tlc: u32,
    pub nlc: u32,
}

impl SegmentIds {
    pub fn get(&self, layer: Layer) -> u32 {
        match layer {
            Layer::Network => self.nlc,
            Layer::Transport => self.tlc,
            Layer::Application => self.alc,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuleIdError {
    #[error("{layer} segment value {value} does not fit in {bits} bits")]
    SegmentOverflow { layer: Layer, value: u32, bits: u8 },
    #[error("rule ID is {got} bits wide, layout expects {expected}")]
    WidthMismatch { expected: u8, got: u8 },
    #[error("segment widths {alc}+{tlc}+{nlc} do not add up to {total} rule-ID bits")]
    SegmentSum {
        alc: u8,
        tlc: u8,
        nlc: u8,
        total: u8,
    },
}

impl RuleIdLayout {
    pub fn flat(total_rule_bits: u8) -> Self {
        Self {
            total_rule_bits,
            ..Self::default()
        }
    }

    pub fn segment_bits(&self, layer: Layer) -> u8 {
        match layer {
            Layer::Network => self.nlc_bits,
            Layer::Transport => self.tlc_bits,
            Layer::Application => self.alc_bits,
        }
    }

    /// All-ones segment value: "this layer is not compressed".
    pub fn reserved_segment(&self, layer: Layer) -> u32 {
        mask(self.segment_bits(layer)) as u32
    }

    /// All-ones flat rule ID: "packet is not compressed".
    pub fn reserved_flat(&self) -> u32 {
        mask(self.total_rule_bits) as u32
    }

    /// Bits before the residue.
    pub fn prefix_bits(&self) -> usize {
        usize::from(self.dispatch_bits) + usize::from(self.total_rule_bits)
    }

    pub fn dispatch(&self) -> Bits {
        Bits::truncating(u64::from(self.dispatch_value), self.dispatch_bits)
    }

    fn check_segments(&self) -> Result<(), RuleIdError> {
        let sum = u16::from(self.alc_bits) + u16::from(self.tlc_bits) + u16::from(self.nlc_bits);
        if sum != u16::from(self.total_rule_bits) {
            return Err(RuleIdError::SegmentSum {
                alc: self.alc_bits,
                tlc: self.tlc_bits,
                nlc: self.nlc_bits,
                total: self.total_rule_bits,
            });
        }
        Ok(())
    }

    /// Packs segment values as ALC | TLC | NLC, most significant first.
    pub fn encode_rule_id(&self, ids: SegmentIds) -> Result<Bits, RuleIdError> {
        self.check_segments()?;
        let mut value = 0u64;
        for layer in [Layer::Application, Layer::Transport, Layer::Network] {
            let bits = self.segment_bits(layer);
            let v = ids.get(layer);
            if u64::from(v) > mask(bits) {
                return Err(RuleIdError::SegmentOverflow {
                    layer,
                    value: v,
                    bits,
                });
            }
            value = (value << bits) | u64::from(v);
        }
        Ok(Bits::truncating(value, self.total_rule_bits))
    }

    pub fn decode_rule_id(&self, bits: Bits) -> Result<SegmentIds, RuleIdError> {
        self.check_segments()?;
        if bits.width() != self.total_rule_bits {
            return Err(RuleIdError::WidthMismatch {
                expected: self.total_rule_bits,
                got: bits.width(),
            });
        }
        let v = bits.value();
        let nlc = v & mask(self.nlc_bits);
        let tlc = (v >> self.nlc_bits) & mask(self.tlc_bits);
        let alc = (v >> (self.nlc_bits + self.tlc_bits)) & mask(self.alc_bits);
        Ok(SegmentIds {
            alc: alc as u32,
            tlc: tlc as u32,
            nlc: nlc as u32,
        })
    }

    pub fn is_all_reserved(&self, ids: SegmentIds) -> bool {
        Layer::ALL
            .iter()
            .all(|&l| ids.get(l) == self.reserved_segment(l))
    }

    fn violations(&self, layered: bool) -> Vec<ViolationKind> {
        let mut out = Vec::new();
        if self.dispatch_bits > 8 || u64::from(self.dispatch_value) > mask(self.dispatch_bits) {
            out.push(ViolationKind::Layout(format!(
                "dispatch value {:#b} does not fit {} bits",
                self.dispatch_value, self.dispatch_bits
            )));
        }
        if !(1..=16).contains(&self.total_rule_bits) {
            out.push(ViolationKind::Layout(format!(
                "rule ID width {} outside 1..=16",
                self.total_rule_bits
            )));
        }
        if layered {
            if let Err(e) = self.check_segments() {
                out.push(ViolationKind::Layout(e.to_string()));
            }
            for layer in Layer::ALL {
                if self.segment_bits(layer) == 0 {
                    out.push(ViolationKind::Layout(format!(
                        "{layer} segment has zero width"
                    )));
                }
            }
        }
        out
    }
}

/// Where a violation was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleRef {
    Flat(u32),
    Layer(Layer, u32),
}

impl fmt::Display for RuleRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleRef::Flat(id) => write!(f, "rule {id}"),
            RuleRef::Layer(layer, id) => write!(f, "{layer} rule {id}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    #[error("equal operator without a target value")]
    MissingTarget,
    #[error("target value {value:#x} wider than {width} bits")]
    TargetTooWide { value: u64, width: u8 },
    #[error("not-sent requires the equal operator")]
    NotSentRequiresEqual,
    #[error("{0} requires the ignore operator")]
    ComputedActionRequiresIgnore(CdAction),
    #[error("{0} cannot be applied to this field")]
    ActionNotApplicable(CdAction),
    #[error("deviid-did applies to the device's own address: source IID upstream, destination IID downstream")]
    DeviceIidDirection,
    #[error("field position {0} does not exist")]
    PositionOutOfRange(u8),
    #[error("field belongs to another layer than {0}")]
    WrongLayer(Layer),
    #[error("rule has no field descriptors")]
    EmptyRule,
    #[error("{0} descriptors must list every header field once, in header order")]
    IncompleteHeader(HeaderKind),
    #[error("header sequence {0} is not a valid IPv6 chain")]
    BadHeaderChain(String),
    #[error("next-header target {target} contradicts the {transport} descriptors")]
    NextHeaderConflict { target: u64, transport: HeaderKind },
    #[error("rule ID used more than once")]
    DuplicateRuleId,
    #[error("rule ID {id} is at or above the reserved value {reserved}")]
    ReservedRuleId { id: u32, reserved: u32 },
    #[error("descriptor-for-descriptor duplicate of rule {0}")]
    DuplicateRule(u32),
    #[error("layout: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: Option<RuleRef>,
    pub field: Option<(usize, FieldId)>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(r) = self.rule {
            write!(f, "{r}")?;
            if let Some((i, id)) = self.field {
                write!(f, ", field #{i} ({id})")?;
            }
            f.write_str(": ")?;
        }
        write!(f, "{}", self.kind)
    }
}

fn descriptor_violations(rule: RuleRef, fields: &[FieldDescriptor], out: &mut Vec<Violation>) {
    if fields.is_empty() {
        out.push(Violation {
            rule: Some(rule),
            field: None,
            kind: ViolationKind::EmptyRule,
        });
    }
    for (i, d) in fields.iter().enumerate() {
        out.extend(d.violations().into_iter().map(|kind| Violation {
            rule: Some(rule),
            field: Some((i, d.field_id)),
            kind,
        }));
    }
    for (kind, run) in header_runs(fields) {
        let ids = run.iter().map(|d| d.field_id);
        if !ids.eq(kind.fields().iter().copied()) {
            out.push(Violation {
                rule: Some(rule),
                field: None,
                kind: ViolationKind::IncompleteHeader(kind),
            });
        }
    }
}

fn next_header_target(fields: &[FieldDescriptor]) -> Option<u64> {
    fields
        .iter()
        .find(|d| d.field_id == FieldId::Ipv6NextHeader)
        .filter(|d| d.matching_operator == MatchingOperator::Equal)
        .and_then(|d| d.target_value)
}

/// Whether a transport rule allows a CoAP header above it.
fn allows_coap(fields: &[FieldDescriptor]) -> bool {
    let port = |id| {
        fields
            .iter()
            .find(|d| d.field_id == id)
            .map(|d| match d.matching_operator {
                MatchingOperator::Ignore => true,
                MatchingOperator::Equal => d.target_value == Some(u64::from(COAP_PORT)),
            })
            .unwrap_or(false)
    };
    port(FieldId::UdpSrcPort) || port(FieldId::UdpDstPort)
}

fn transport_follows(network: &[FieldDescriptor], transport: HeaderKind) -> bool {
    match next_header_target(network) {
        Some(t) => transport.next_header_value().map(u64::from) == Some(t),
        None => true,
    }
}

pub fn validate_flat_rule(rule: &FlatRule, out: &mut Vec<Violation>) {
    let r = RuleRef::Flat(rule.rule_id);
    descriptor_violations(r, &rule.fields, out);
    let kinds = rule.header_kinds();
    let chain_ok = matches!(
        kinds.as_slice(),
        [HeaderKind::Ipv6]
            | [HeaderKind::Ipv6, HeaderKind::Udp]
            | [HeaderKind::Ipv6, HeaderKind::Icmpv6]
            | [HeaderKind::Ipv6, HeaderKind::Udp, HeaderKind::Coap]
    );
    if !rule.fields.is_empty() && !chain_ok {
        let names: Vec<String> = kinds.iter().map(ToString::to_string).collect();
        out.push(Violation {
            rule: Some(r),
            field: None,
            kind: ViolationKind::BadHeaderChain(names.join("/")),
        });
    }
    if let (Some(&transport), Some(target)) = (kinds.get(1), next_header_target(&rule.fields)) {
        if !transport_follows(&rule.fields, transport) {
            out.push(Violation {
                rule: Some(r),
                field: None,
                kind: ViolationKind::NextHeaderConflict { target, transport },
            });
        }
    }
}

pub fn validate_layer_rule(rule: &LayerRule, out: &mut Vec<Violation>) {
    let r = RuleRef::Layer(rule.layer, rule.local_id);
    descriptor_violations(r, &rule.fields, out);
    for (i, d) in rule.fields.iter().enumerate() {
        if d.field_id.layer() != rule.layer {
            out.push(Violation {
                rule: Some(r),
                field: Some((i, d.field_id)),
                kind: ViolationKind::WrongLayer(rule.layer),
            });
        }
    }
    if header_runs(&rule.fields).len() > 1 {
        out.push(Violation {
            rule: Some(r),
            field: None,
            kind: ViolationKind::BadHeaderChain("more than one header in a layer rule".into()),
        });
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatContext {
    pub rules: Vec<FlatRule>,
    pub layout: RuleIdLayout,
}

impl FlatContext {
    pub fn new(rules: Vec<FlatRule>, layout: RuleIdLayout) -> Self {
        Self { rules, layout }
    }

    pub fn rule(&self, id: u32) -> Option<&FlatRule> {
        self.rules.iter().find(|r| r.rule_id == id)
    }

    pub fn descriptor_count(&self) -> usize {
        self.rules.iter().map(|r| r.fields.len()).sum()
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out: Vec<Violation> = self
            .layout
            .violations(false)
            .into_iter()
            .map(|kind| Violation {
                rule: None,
                field: None,
                kind,
            })
            .collect();
        let reserved = self.layout.reserved_flat();
        let mut seen = HashMap::new();
        for rule in &self.rules {
            let r = RuleRef::Flat(rule.rule_id);
            if seen.insert(rule.rule_id, ()).is_some() {
                out.push(Violation {
                    rule: Some(r),
                    field: None,
                    kind: ViolationKind::DuplicateRuleId,
                });
            }
            if rule.rule_id >= reserved {
                out.push(Violation {
                    rule: Some(r),
                    field: None,
                    kind: ViolationKind::ReservedRuleId {
                        id: rule.rule_id,
                        reserved,
                    },
                });
            }
            validate_flat_rule(rule, &mut out);
        }
        out
    }
}

/// Origin of a flattened rule: the layer rules it concatenates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlatOrigin {
    pub nlc: u32,
    pub tlc: Option<u32>,
    pub alc: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayeredContext {
    pub nlc: Vec<LayerRule>,
    pub tlc: Vec<LayerRule>,
    pub alc: Vec<LayerRule>,
    pub layout: RuleIdLayout,
}

impl LayeredContext {
    pub fn new(layout: RuleIdLayout) -> Self {
        Self {
            nlc: Vec::new(),
            tlc: Vec::new(),
            alc: Vec::new(),
            layout,
        }
    }

    /// Adds a rule to the list of its own layer.
    pub fn push(&mut self, rule: LayerRule) {
        match rule.layer {
            Layer::Network => self.nlc.push(rule),
            Layer::Transport => self.tlc.push(rule),
            Layer::Application => self.alc.push(rule),
        }
    }

    pub fn rules(&self, layer: Layer) -> &[LayerRule] {
        match layer {
            Layer::Network => &self.nlc,
            Layer::Transport => &self.tlc,
            Layer::Application => &self.alc,
        }
    }

    pub fn rule(&self, layer: Layer, id: u32) -> Option<&LayerRule> {
        self.rules(layer).iter().find(|r| r.local_id == id)
    }

    pub fn descriptor_count(&self) -> usize {
        Layer::ALL
            .iter()
            .flat_map(|&l| self.rules(l))
            .map(|r| r.fields.len())
            .sum()
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out: Vec<Violation> = self
            .layout
            .violations(true)
            .into_iter()
            .map(|kind| Violation {
                rule: None,
                field: None,
                kind,
            })
            .collect();
        for layer in Layer::ALL {
            let reserved = self.layout.reserved_segment(layer);
            let mut ids = HashMap::new();
            let mut bodies: HashMap<&[FieldDescriptor], u32> = HashMap::new();
            for rule in self.rules(layer) {
                let r = RuleRef::Layer(layer, rule.local_id);
                if rule.layer != layer {
                    out.push(Violation {
                        rule: Some(r),
                        field: None,
                        kind: ViolationKind::WrongLayer(layer),
                    });
                }
                if ids.insert(rule.local_id, ()).is_some() {
                    out.push(Violation {
                        rule: Some(r),
                        field: None,
                        kind: ViolationKind::DuplicateRuleId,
                    });
                }
                if rule.local_id >= reserved {
                    out.push(Violation {
                        rule: Some(r),
                        field: None,
                        kind: ViolationKind::ReservedRuleId {
                            id: rule.local_id,
                            reserved,
                        },
                    });
                }
                if let Some(&first) = bodies.get(rule.fields.as_slice()) {
                    out.push(Violation {
                        rule: Some(r),
                        field: None,
                        kind: ViolationKind::DuplicateRule(first),
                    });
                } else {
                    bodies.insert(&rule.fields, rule.local_id);
                }
                validate_layer_rule(rule, &mut out);
            }
        }
        out
    }

    /// Equivalent flat context: one rule per chain-consistent combination of
    /// layer rules, taken as deep as the layered context allows. A transport
    /// rule that admits CoAP also yields a rule without the application part,
    /// numbered after its CoAP combinations, for UDP datagrams that carry no
    /// CoAP header. Likewise a network rule that leaves the next header open
    /// yields a network-only rule after its transport combinations.
    ///
    /// Rules are numbered in (network, transport, application) local-ID order.
    /// The rule-ID width grows when the combinations outnumber the usable IDs.
    pub fn flatten(&self) -> FlatContext {
        self.flatten_with_origins().0
    }

    pub fn flatten_with_origins(&self) -> (FlatContext, Vec<FlatOrigin>) {
        let sorted = |layer| {
            let mut v: Vec<&LayerRule> = self.rules(layer).iter().collect();
            v.sort_by_key(|r| r.local_id);
            v
        };
        let (nlc, tlc, alc) = (
            sorted(Layer::Network),
            sorted(Layer::Transport),
            sorted(Layer::Application),
        );
        let mut combos: Vec<(Vec<&LayerRule>, FlatOrigin)> = Vec::new();
        for n in &nlc {
            let transports: Vec<_> = tlc
                .iter()
                .filter(|t| {
                    t.header_kind()
                        .is_some_and(|k| transport_follows(&n.fields, k))
                })
                .collect();
            if transports.is_empty() {
                combos.push((
                    vec![n],
                    FlatOrigin {
                        nlc: n.local_id,
                        tlc: None,
                        alc: None,
                    },
                ));
                continue;
            }
            for t in transports {
                let apps: Vec<_> =
                    if t.header_kind() == Some(HeaderKind::Udp) && allows_coap(&t.fields) {
                        alc.iter().collect()
                    } else {
                        Vec::new()
                    };
                for a in apps {
                    combos.push((
                        vec![n, t, a],
                        FlatOrigin {
                            nlc: n.local_id,
                            tlc: Some(t.local_id),
                            alc: Some(a.local_id),
                        },
                    ));
                }
                combos.push((
                    vec![n, t],
                    FlatOrigin {
                        nlc: n.local_id,
                        tlc: Some(t.local_id),
                        alc: None,
                    },
                ));
            }
            if next_header_target(&n.fields).is_none() {
                combos.push((
                    vec![n],
                    FlatOrigin {
                        nlc: n.local_id,
                        tlc: None,
                        alc: None,
                    },
                ));
            }
        }

        let mut layout = self.layout;
        while (layout.reserved_flat() as usize) < combos.len() {
            layout.total_rule_bits += 1;
        }
        let mut rules = Vec::with_capacity(combos.len());
        let mut origins = Vec::with_capacity(combos.len());
        for (i, (parts, origin)) in combos.into_iter().enumerate() {
            rules.push(FlatRule {
                rule_id: i as u32,
                fields: parts
                    .iter()
                    .flat_map(|r| r.fields.iter().cloned())
                    .collect(),
            });
            origins.push(origin);
        }
        (FlatContext { rules, layout }, origins)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Flat,
    Layered,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Flat => "flat",
            Mode::Layered => "layered",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Context {
    Flat(FlatContext),
    Layered(LayeredContext),
}

impl Context {
    pub fn mode(&self) -> Mode {
        match self {
            Context::Flat(_) => Mode::Flat,
            Context::Layered(_) => Mode::Layered,
        }
    }

    pub fn layout(&self) -> &RuleIdLayout {
        match self {
            Context::Flat(c) => &c.layout,
            Context::Layered(c) => &c.layout,
        }
    }

    pub fn descriptor_count(&self) -> usize {
        match self {
            Context::Flat(c) => c.descriptor_count(),
            Context::Layered(c) => c.descriptor_count(),
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_context(self)
    }
}

impl From<FlatContext> for Context {
    fn from(c: FlatContext) -> Self {
        Context::Flat(c)
    }
}

impl From<LayeredContext> for Context {
    fn from(c: LayeredContext) -> Self {
        Context::Layered(c)
    }
}

/// Returns every structural problem in the context; empty means valid.
pub fn validate_context(ctx: &Context) -> Vec<Violation> {
    match ctx {
        Context::Flat(c) => c.validate(),
        Context::Layered(c) => c.validate(),
    }
}

/// Count of rules per layer, used in reports.
pub fn rules_per_layer(ctx: &LayeredContext) -> BTreeMap<Layer, usize> {
    Layer::ALL
        .iter()
        .map(|&l| (l, ctx.rules(l).len()))
        .collect()
}
