//! Field-addressable IPv6 / UDP / ICMPv6 / CoAP header stacks.
//!
//! A [`HeaderStack`] is what rules are matched against. Every header field
//! is reachable by [`FieldId`] and comes back as a [`Bits`] value of the
//! field's natural width. IPv6 addresses are split into 64-bit prefix and
//! IID halves so that rules can treat them independently.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::Bits;
use crate::checksum::Checksum;

pub const IPV6_HEADER_LEN: usize = 40;
pub const UDP_HEADER_LEN: usize = 8;
pub const ICMPV6_HEADER_LEN: usize = 4;
pub const COAP_HEADER_LEN: usize = 4;

pub const NEXT_HEADER_UDP: u8 = 17;
pub const NEXT_HEADER_ICMPV6: u8 = 58;

/// UDP port that marks the payload as CoAP.
pub const COAP_PORT: u16 = 5683;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PacketError {
    #[error("truncated {header} header: need {needed} octets, have {available}")]
    TruncatedHeader {
        header: HeaderKind,
        needed: usize,
        available: usize,
    },
    #[error("IPv6 version field is {0}, expected 6")]
    BadVersion(u8),
    #[error("{header} length field says {declared} octets but {actual} are present")]
    LengthMismatch {
        header: HeaderKind,
        declared: usize,
        actual: usize,
    },
    #[error("inconsistent header chain: {0}")]
    InconsistentChain(&'static str),
    #[error("field {0} is not present in this header stack")]
    FieldAbsent(FieldId),
    #[error("field {field} has no instance at position {position}")]
    PositionOutOfRange { field: FieldId, position: u8 },
    #[error("value {value:#x} does not fit the {width}-bit field {field}")]
    ValueTooWide {
        field: FieldId,
        value: u64,
        width: u8,
    },
}

/// Transmission direction of a packet relative to the constrained device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Network,
    Transport,
    Application,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Network, Layer::Transport, Layer::Application];
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Network => "network",
            Layer::Transport => "transport",
            Layer::Application => "application",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeaderKind {
    Ipv6,
    Udp,
    Icmpv6,
    Coap,
}

impl HeaderKind {
    pub fn layer(self) -> Layer {
        match self {
            HeaderKind::Ipv6 => Layer::Network,
            HeaderKind::Udp | HeaderKind::Icmpv6 => Layer::Transport,
            HeaderKind::Coap => Layer::Application,
        }
    }

    /// Fixed header length in octets.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        match self {
            HeaderKind::Ipv6 => IPV6_HEADER_LEN,
            HeaderKind::Udp => UDP_HEADER_LEN,
            HeaderKind::Icmpv6 => ICMPV6_HEADER_LEN,
            HeaderKind::Coap => COAP_HEADER_LEN,
        }
    }

    /// Fields of this header, in wire order.
    pub fn fields(self) -> &'static [FieldId] {
        use FieldId::*;
        match self {
            HeaderKind::Ipv6 => &[
                Ipv6Version,
                Ipv6TrafficClass,
                Ipv6FlowLabel,
                Ipv6PayloadLength,
                Ipv6NextHeader,
                Ipv6HopLimit,
                Ipv6SrcPrefix,
                Ipv6SrcIid,
                Ipv6DstPrefix,
                Ipv6DstIid,
            ],
            HeaderKind::Udp => &[UdpSrcPort, UdpDstPort, UdpLength, UdpChecksum],
            HeaderKind::Icmpv6 => &[Icmpv6Type, Icmpv6Code, Icmpv6Checksum],
            HeaderKind::Coap => &[
                CoapVersion,
                CoapType,
                CoapTokenLength,
                CoapCode,
                CoapMessageId,
            ],
        }
    }

    /// Next-header value announcing this transport, if it is one.
    pub fn next_header_value(self) -> Option<u8> {
        match self {
            HeaderKind::Udp => Some(NEXT_HEADER_UDP),
            HeaderKind::Icmpv6 => Some(NEXT_HEADER_ICMPV6),
            _ => None,
        }
    }
}

impl fmt::Display for HeaderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeaderKind::Ipv6 => "IPv6",
            HeaderKind::Udp => "UDP",
            HeaderKind::Icmpv6 => "ICMPv6",
            HeaderKind::Coap => "CoAP",
        })
    }
}

/// Identifies one header field.
///
/// The second IPv6 destination row of the classic IPv6/UDP rule table
/// (target `::1000`) is the destination IID, hence [`FieldId::Ipv6DstIid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FieldId {
    #[serde(rename = "IPv6.V")]
    Ipv6Version,
    #[serde(rename = "IPv6.TC")]
    Ipv6TrafficClass,
    #[serde(rename = "IPv6.FL")]
    Ipv6FlowLabel,
    #[serde(rename = "IPv6.L")]
    Ipv6PayloadLength,
    #[serde(rename = "IPv6.NH")]
    Ipv6NextHeader,
    #[serde(rename = "IPv6.HL")]
    Ipv6HopLimit,
    #[serde(rename = "IPv6.SPrefix")]
    Ipv6SrcPrefix,
    #[serde(rename = "IPv6.SIID")]
    Ipv6SrcIid,
    #[serde(rename = "IPv6.DPrefix")]
    Ipv6DstPrefix,
    #[serde(rename = "IPv6.DIID")]
    Ipv6DstIid,
    #[serde(rename = "UDP.SPort")]
    UdpSrcPort,
    #[serde(rename = "UDP.DPort")]
    UdpDstPort,
    #[serde(rename = "UDP.L")]
    UdpLength,
    #[serde(rename = "UDP.C")]
    UdpChecksum,
    #[serde(rename = "ICMPv6.Type")]
    Icmpv6Type,
    #[serde(rename = "ICMPv6.Code")]
    Icmpv6Code,
    #[serde(rename = "ICMPv6.C")]
    Icmpv6Checksum,
    #[serde(rename = "CoAP.V")]
    CoapVersion,
    #[serde(rename = "CoAP.T")]
    CoapType,
    #[serde(rename = "CoAP.TKL")]
    CoapTokenLength,
    #[serde(rename = "CoAP.Code")]
    CoapCode,
    #[serde(rename = "CoAP.MID")]
    CoapMessageId,
}

impl FieldId {
    pub fn header(self) -> HeaderKind {
        use FieldId::*;
        match self {
            Ipv6Version | Ipv6TrafficClass | Ipv6FlowLabel | Ipv6PayloadLength | Ipv6NextHeader
            | Ipv6HopLimit | Ipv6SrcPrefix | Ipv6SrcIid | Ipv6DstPrefix | Ipv6DstIid => {
                HeaderKind::Ipv6
            }
            UdpSrcPort | UdpDstPort | UdpLength | UdpChecksum => HeaderKind::Udp,
            Icmpv6Type | Icmpv6Code | Icmpv6Checksum => HeaderKind::Icmpv6,
            CoapVersion | CoapType | CoapTokenLength | CoapCode | CoapMessageId => HeaderKind::Coap,
        }
    }

    pub fn layer(self) -> Layer {
        self.header().layer()
    }

    /// Natural width in bits.
    pub fn width(self) -> u8 {
        use FieldId::*;
        match self {
            Ipv6Version => 4,
            Ipv6TrafficClass => 8,
            Ipv6FlowLabel => 20,
            Ipv6PayloadLength => 16,
            Ipv6NextHeader | Ipv6HopLimit => 8,
            Ipv6SrcPrefix | Ipv6SrcIid | Ipv6DstPrefix | Ipv6DstIid => 64,
            UdpSrcPort | UdpDstPort | UdpLength | UdpChecksum => 16,
            Icmpv6Type | Icmpv6Code => 8,
            Icmpv6Checksum => 16,
            CoapVersion | CoapType => 2,
            CoapTokenLength => 4,
            CoapCode => 8,
            CoapMessageId => 16,
        }
    }

    pub fn is_length(self) -> bool {
        matches!(self, FieldId::Ipv6PayloadLength | FieldId::UdpLength)
    }

    pub fn is_checksum(self) -> bool {
        matches!(self, FieldId::UdpChecksum | FieldId::Icmpv6Checksum)
    }

    pub fn is_iid(self) -> bool {
        matches!(self, FieldId::Ipv6SrcIid | FieldId::Ipv6DstIid)
    }

    pub fn name(self) -> &'static str {
        use FieldId::*;
        match self {
            Ipv6Version => "IPv6.V",
            Ipv6TrafficClass => "IPv6.TC",
            Ipv6FlowLabel => "IPv6.FL",
            Ipv6PayloadLength => "IPv6.L",
            Ipv6NextHeader => "IPv6.NH",
            Ipv6HopLimit => "IPv6.HL",
            Ipv6SrcPrefix => "IPv6.SPrefix",
            Ipv6SrcIid => "IPv6.SIID",
            Ipv6DstPrefix => "IPv6.DPrefix",
            Ipv6DstIid => "IPv6.DIID",
            UdpSrcPort => "UDP.SPort",
            UdpDstPort => "UDP.DPort",
            UdpLength => "UDP.L",
            UdpChecksum => "UDP.C",
            Icmpv6Type => "ICMPv6.Type",
            Icmpv6Code => "ICMPv6.Code",
            Icmpv6Checksum => "ICMPv6.C",
            CoapVersion => "CoAP.V",
            CoapType => "CoAP.T",
            CoapTokenLength => "CoAP.TKL",
            CoapCode => "CoAP.Code",
            CoapMessageId => "CoAP.MID",
        }
    }
}

impl fmt::Display for FieldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipv6Header {
    pub version: u8,
    pub traffic_class: u8,
    pub flow_label: u32,
    pub payload_length: u16,
    pub next_header: u8,
    pub hop_limit: u8,
    pub src_prefix: u64,
    pub src_iid: u64,
    pub dst_prefix: u64,
    pub dst_iid: u64,
}

impl Default for Ipv6Header {
    fn default() -> Self {
        Self {
            version: 6,
            traffic_class: 0,
            flow_label: 0,
            payload_length: 0,
            next_header: 0,
            hop_limit: 0,
            src_prefix: 0,
            src_iid: 0,
            dst_prefix: 0,
            dst_iid: 0,
        }
    }
}

impl Ipv6Header {
    pub fn from_bytes(b: &[u8; IPV6_HEADER_LEN]) -> Self {
        let word = u32::from_be_bytes([b[0], b[1], b[2], b[3]]);
        let u64_at = |i: usize| u64::from_be_bytes(b[i..i + 8].try_into().unwrap());
        Self {
            version: (word >> 28) as u8,
            traffic_class: (word >> 20) as u8,
            flow_label: word & 0x000F_FFFF,
            payload_length: u16::from_be_bytes([b[4], b[5]]),
            next_header: b[6],
            hop_limit: b[7],
            src_prefix: u64_at(8),
            src_iid: u64_at(16),
            dst_prefix: u64_at(24),
            dst_iid: u64_at(32),
        }
    }

    pub fn to_bytes(&self) -> [u8; IPV6_HEADER_LEN] {
        let mut b = [0u8; IPV6_HEADER_LEN];
        let word = (u32::from(self.version & 0x0F) << 28)
            | (u32::from(self.traffic_class) << 20)
            | (self.flow_label & 0x000F_FFFF);
        b[0..4].copy_from_slice(&word.to_be_bytes());
        b[4..6].copy_from_slice(&self.payload_length.to_be_bytes());
        b[6] = self.next_header;
        b[7] = self.hop_limit;
        b[8..16].copy_from_slice(&self.src_prefix.to_be_bytes());
        b[16..24].copy_from_slice(&self.src_iid.to_be_bytes());
        b[24..32].copy_from_slice(&self.dst_prefix.to_be_bytes());
        b[32..40].copy_from_slice(&self.dst_iid.to_be_bytes());
        b
    }

    pub fn src_addr(&self) -> [u8; 16] {
        join_addr(self.src_prefix, self.src_iid)
    }

    pub fn dst_addr(&self) -> [u8; 16] {
        join_addr(self.dst_prefix, self.dst_iid)
    }
}

fn join_addr(prefix: u64, iid: u64) -> [u8; 16] {
    let mut a = [0u8; 16];
    a[..8].copy_from_slice(&prefix.to_be_bytes());
    a[8..].copy_from_slice(&iid.to_be_bytes());
    a
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UdpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub length: u16,
    pub checksum: u16,
}

impl UdpHeader {
    pub fn from_bytes(b: &[u8; UDP_HEADER_LEN]) -> Self {
        Self {
            src_port: u16::from_be_bytes([b[0], b[1]]),
            dst_port: u16::from_be_bytes([b[2], b[3]]),
            length: u16::from_be_bytes([b[4], b[5]]),
            checksum: u16::from_be_bytes([b[6], b[7]]),
        }
    }

    pub fn to_bytes(&self) -> [u8; UDP_HEADER_LEN] {
        let mut b = [0u8; UDP_HEADER_LEN];
        b[0..2].copy_from_slice(&self.src_port.to_be_bytes());
        b[2..4].copy_from_slice(&self.dst_port.to_be_bytes());
        b[4..6].copy_from_slice(&self.length.to_be_bytes());
        b[6..8].copy_from_slice(&self.checksum.to_be_bytes());
        b
    }

    fn carries_coap(&self) -> bool {
        self.src_port == COAP_PORT || self.dst_port == COAP_PORT
    }
}

/// Fixed part of an ICMPv6 message. The message body travels as the stack payload.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Icmpv6Header {
    pub msg_type: u8,
    pub code: u8,
    pub checksum: u16,
}

impl Icmpv6Header {
    pub fn from_bytes(b: &[u8; ICMPV6_HEADER_LEN]) -> Self {
        Self {
            msg_type: b[0],
            code: b[1],
            checksum: u16::from_be_bytes([b[2], b[3]]),
        }
    }

    pub fn to_bytes(&self) -> [u8; ICMPV6_HEADER_LEN] {
        let c = self.checksum.to_be_bytes();
        [self.msg_type, self.code, c[0], c[1]]
    }
}

/// The 4-octet fixed CoAP header. Token and options stay in the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoapHeader {
    pub version: u8,
    pub msg_type: u8,
    pub token_length: u8,
    pub code: u8,
    pub message_id: u16,
}

impl Default for CoapHeader {
    fn default() -> Self {
        Self {
            version: 1,
            msg_type: 0,
            token_length: 0,
            code: 0,
            message_id: 0,
        }
    }
}

impl CoapHeader {
    pub fn from_bytes(b: &[u8; COAP_HEADER_LEN]) -> Self {
        Self {
            version: b[0] >> 6,
            msg_type: (b[0] >> 4) & 0x3,
            token_length: b[0] & 0x0F,
            code: b[1],
            message_id: u16::from_be_bytes([b[2], b[3]]),
        }
    }

    pub fn to_bytes(&self) -> [u8; COAP_HEADER_LEN] {
        let mid = self.message_id.to_be_bytes();
        [
            ((self.version & 0x3) << 6) | ((self.msg_type & 0x3) << 4) | (self.token_length & 0x0F),
            self.code,
            mid[0],
            mid[1],
        ]
    }

    fn looks_valid(&self) -> bool {
        self.version == 1 && self.token_length <= 8
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    Udp(UdpHeader),
    Icmpv6(Icmpv6Header),
}

impl Transport {
    pub fn kind(&self) -> HeaderKind {
        match self {
            Transport::Udp(_) => HeaderKind::Udp,
            Transport::Icmpv6(_) => HeaderKind::Icmpv6,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Transport::Udp(h) => h.to_bytes().to_vec(),
            Transport::Icmpv6(h) => h.to_bytes().to_vec(),
        }
    }
}

/// A parsed IPv6 header chain plus whatever follows it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderStack {
    pub network: Ipv6Header,
    pub transport: Option<Transport>,
    pub application: Option<CoapHeader>,
    pub payload: Vec<u8>,
    pub direction: Direction,
}

/// Parses an IPv6 packet into a header stack.
///
/// Next-header values other than UDP and ICMPv6 leave everything after the
/// IPv6 header as opaque payload. A UDP datagram is read as CoAP when either
/// port is 5683 and the first four payload octets form a plausible CoAP
/// fixed header. Length fields must agree with the buffer size.
pub fn parse_stack(bytes: &[u8], direction: Direction) -> Result<HeaderStack, PacketError> {
    let (ip_bytes, rest) = split_header::<IPV6_HEADER_LEN>(bytes, HeaderKind::Ipv6)?;
    let network = Ipv6Header::from_bytes(ip_bytes);
    if network.version != 6 {
        return Err(PacketError::BadVersion(network.version));
    }
    if usize::from(network.payload_length) != rest.len() {
        return Err(PacketError::LengthMismatch {
            header: HeaderKind::Ipv6,
            declared: usize::from(network.payload_length),
            actual: rest.len(),
        });
    }

    let mut stack = HeaderStack {
        network,
        transport: None,
        application: None,
        payload: Vec::new(),
        direction,
    };
    let rest = match stack.network.next_header {
        NEXT_HEADER_UDP => {
            let (h, rest) = split_header::<UDP_HEADER_LEN>(rest, HeaderKind::Udp)?;
            let udp = UdpHeader::from_bytes(h);
            if usize::from(udp.length) != rest.len() + UDP_HEADER_LEN {
                return Err(PacketError::LengthMismatch {
                    header: HeaderKind::Udp,
                    declared: usize::from(udp.length),
                    actual: rest.len() + UDP_HEADER_LEN,
                });
            }
            let rest = if udp.carries_coap() {
                match coap_prefix(rest) {
                    Some(coap) => {
                        stack.application = Some(coap);
                        &rest[COAP_HEADER_LEN..]
                    }
                    None => rest,
                }
            } else {
                rest
            };
            stack.transport = Some(Transport::Udp(udp));
            rest
        }
        NEXT_HEADER_ICMPV6 => {
            let (h, rest) = split_header::<ICMPV6_HEADER_LEN>(rest, HeaderKind::Icmpv6)?;
            stack.transport = Some(Transport::Icmpv6(Icmpv6Header::from_bytes(h)));
            rest
        }
        _ => rest,
    };
    stack.payload = rest.to_vec();
    Ok(stack)
}

fn coap_prefix(data: &[u8]) -> Option<CoapHeader> {
    let fixed: &[u8; COAP_HEADER_LEN] = data.get(..COAP_HEADER_LEN)?.try_into().ok()?;
    let coap = CoapHeader::from_bytes(fixed);
    coap.looks_valid().then_some(coap)
}

fn split_header<const N: usize>(
    data: &[u8],
    header: HeaderKind,
) -> Result<(&[u8; N], &[u8]), PacketError> {
    if data.len() < N {
        return Err(PacketError::TruncatedHeader {
            header,
            needed: N,
            available: data.len(),
        });
    }
    let (h, rest) = data.split_at(N);
    Ok((h.try_into().unwrap(), rest))
}

/// Serializes a stack to wire bytes, recomputing the IPv6 payload length and
/// UDP length from the actual content.
pub fn serialize_stack(stack: &HeaderStack) -> Result<Vec<u8>, PacketError> {
    stack.check_chain()?;
    let mut s = stack.clone();
    s.refresh_lengths();
    let mut out = Vec::with_capacity(s.total_len());
    out.extend_from_slice(&s.network.to_bytes());
    if let Some(t) = &s.transport {
        out.extend_from_slice(&t.to_bytes());
    }
    if let Some(a) = &s.application {
        out.extend_from_slice(&a.to_bytes());
    }
    out.extend_from_slice(&s.payload);
    Ok(out)
}

impl HeaderStack {
    pub fn check_chain(&self) -> Result<(), PacketError> {
        let nh = self.network.next_header;
        match &self.transport {
            Some(Transport::Udp(_)) if nh != NEXT_HEADER_UDP => Err(
                PacketError::InconsistentChain("UDP transport but next header is not 17"),
            ),
            Some(Transport::Icmpv6(_)) if nh != NEXT_HEADER_ICMPV6 => Err(
                PacketError::InconsistentChain("ICMPv6 transport but next header is not 58"),
            ),
            None if nh == NEXT_HEADER_UDP || nh == NEXT_HEADER_ICMPV6 => Err(
                PacketError::InconsistentChain("next header announces a transport that is missing"),
            ),
            _ => Ok(()),
        }?;
        match (&self.application, &self.transport) {
            (Some(_), Some(Transport::Udp(u))) if u.carries_coap() => Ok(()),
            (Some(_), _) => Err(PacketError::InconsistentChain(
                "CoAP header requires UDP on port 5683",
            )),
            (None, _) => Ok(()),
        }
    }

    /// Octets after the IPv6 header.
    pub fn upper_len(&self) -> usize {
        self.transport.as_ref().map_or(0, |t| t.kind().len())
            + self.application.as_ref().map_or(0, |_| COAP_HEADER_LEN)
            + self.payload.len()
    }

    pub fn total_len(&self) -> usize {
        IPV6_HEADER_LEN + self.upper_len()
    }

    /// Octets of all parsed headers, excluding payload.
    pub fn header_len(&self) -> usize {
        self.total_len() - self.payload.len()
    }

    pub fn refresh_lengths(&mut self) {
        let upper = self.upper_len();
        self.network.payload_length = upper as u16;
        if let Some(Transport::Udp(u)) = &mut self.transport {
            u.length = upper as u16;
        }
    }

    pub fn header(&self, layer: Layer) -> Option<HeaderKind> {
        match layer {
            Layer::Network => Some(HeaderKind::Ipv6),
            Layer::Transport => self.transport.as_ref().map(Transport::kind),
            Layer::Application => self.application.as_ref().map(|_| HeaderKind::Coap),
        }
    }

    pub fn has_header(&self, kind: HeaderKind) -> bool {
        self.header(kind.layer()) == Some(kind)
    }

    /// Wire bytes of a single layer's header, as currently stored.
    pub fn layer_bytes(&self, layer: Layer) -> Option<Vec<u8>> {
        match layer {
            Layer::Network => Some(self.network.to_bytes().to_vec()),
            Layer::Transport => self.transport.as_ref().map(Transport::to_bytes),
            Layer::Application => self.application.as_ref().map(|a| a.to_bytes().to_vec()),
        }
    }

    /// Recomputes and stores the transport checksum, if there is one.
    pub fn fill_checksum(&mut self) {
        let layer = match &self.transport {
            Some(Transport::Udp(_)) => ChecksumLayer::Udp,
            Some(Transport::Icmpv6(_)) => ChecksumLayer::Icmpv6,
            None => return,
        };
        let sum = compute_checksum(self, layer).expect("transport layer present");
        self.set_field(layer.field(), Bits::truncating(u64::from(sum), 16))
            .expect("checksum field present");
    }

    pub fn set_field(&mut self, field: FieldId, value: Bits) -> Result<(), PacketError> {
        if value.width() != field.width() {
            return Err(PacketError::ValueTooWide {
                field,
                value: value.value(),
                width: field.width(),
            });
        }
        let v = value.value();
        use FieldId::*;
        match field {
            Ipv6Version => self.network.version = v as u8,
            Ipv6TrafficClass => self.network.traffic_class = v as u8,
            Ipv6FlowLabel => self.network.flow_label = v as u32,
            Ipv6PayloadLength => self.network.payload_length = v as u16,
            Ipv6NextHeader => self.network.next_header = v as u8,
            Ipv6HopLimit => self.network.hop_limit = v as u8,
            Ipv6SrcPrefix => self.network.src_prefix = v,
            Ipv6SrcIid => self.network.src_iid = v,
            Ipv6DstPrefix => self.network.dst_prefix = v,
            Ipv6DstIid => self.network.dst_iid = v,
            UdpSrcPort | UdpDstPort | UdpLength | UdpChecksum => {
                let Some(Transport::Udp(u)) = &mut self.transport else {
                    return Err(PacketError::FieldAbsent(field));
                };
                match field {
                    UdpSrcPort => u.src_port = v as u16,
                    UdpDstPort => u.dst_port = v as u16,
                    UdpLength => u.length = v as u16,
                    _ => u.checksum = v as u16,
                }
            }
            Icmpv6Type | Icmpv6Code | Icmpv6Checksum => {
                let Some(Transport::Icmpv6(i)) = &mut self.transport else {
                    return Err(PacketError::FieldAbsent(field));
                };
                match field {
                    Icmpv6Type => i.msg_type = v as u8,
                    Icmpv6Code => i.code = v as u8,
                    _ => i.checksum = v as u16,
                }
            }
            CoapVersion | CoapType | CoapTokenLength | CoapCode | CoapMessageId => {
                let Some(c) = &mut self.application else {
                    return Err(PacketError::FieldAbsent(field));
                };
                match field {
                    CoapVersion => c.version = v as u8,
                    CoapType => c.msg_type = v as u8,
                    CoapTokenLength => c.token_length = v as u8,
                    CoapCode => c.code = v as u8,
                    _ => c.message_id = v as u16,
                }
            }
        }
        Ok(())
    }
}

/// Reads one field of the stack as a bit-string of the field's natural width.
///
/// Every supported field occurs once per header, so only position 0 exists.
pub fn get_field(stack: &HeaderStack, field: FieldId, position: u8) -> Result<Bits, PacketError> {
    if position != 0 {
        return Err(PacketError::PositionOutOfRange { field, position });
    }
    let absent = || PacketError::FieldAbsent(field);
    use FieldId::*;
    let n = &stack.network;
    let value: u64 = match field {
        Ipv6Version => n.version.into(),
        Ipv6TrafficClass => n.traffic_class.into(),
        Ipv6FlowLabel => n.flow_label.into(),
        Ipv6PayloadLength => n.payload_length.into(),
        Ipv6NextHeader => n.next_header.into(),
        Ipv6HopLimit => n.hop_limit.into(),
        Ipv6SrcPrefix => n.src_prefix,
        Ipv6SrcIid => n.src_iid,
        Ipv6DstPrefix => n.dst_prefix,
        Ipv6DstIid => n.dst_iid,
        UdpSrcPort | UdpDstPort | UdpLength | UdpChecksum => {
            let Some(Transport::Udp(u)) = &stack.transport else {
                return Err(absent());
            };
            match field {
                UdpSrcPort => u.src_port,
                UdpDstPort => u.dst_port,
                UdpLength => u.length,
                _ => u.checksum,
            }
            .into()
        }
        Icmpv6Type | Icmpv6Code | Icmpv6Checksum => {
            let Some(Transport::Icmpv6(i)) = &stack.transport else {
                return Err(absent());
            };
            match field {
                Icmpv6Type => i.msg_type.into(),
                Icmpv6Code => i.code.into(),
                _ => i.checksum.into(),
            }
        }
        CoapVersion | CoapType | CoapTokenLength | CoapCode | CoapMessageId => {
            let c = stack.application.as_ref().ok_or_else(absent)?;
            match field {
                CoapVersion => c.version.into(),
                CoapType => c.msg_type.into(),
                CoapTokenLength => c.token_length.into(),
                CoapCode => c.code.into(),
                _ => c.message_id.into(),
            }
        }
    };
    Ok(Bits::truncating(value, field.width()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChecksumLayer {
    Udp,
    Icmpv6,
}

impl ChecksumLayer {
    pub fn field(self) -> FieldId {
        match self {
            ChecksumLayer::Udp => FieldId::UdpChecksum,
            ChecksumLayer::Icmpv6 => FieldId::Icmpv6Checksum,
        }
    }
}

/// Internet checksum over the IPv6 pseudo-header, the transport header with
/// its checksum zeroed, and everything that follows it.
///
/// A UDP result of zero is sent as 0xFFFF, as IPv6 forbids a zero UDP checksum.
pub fn compute_checksum(stack: &HeaderStack, layer: ChecksumLayer) -> Result<u16, PacketError> {
    let (header, next_header) = match (&stack.transport, layer) {
        (Some(Transport::Udp(u)), ChecksumLayer::Udp) => {
            let mut u = u.clone();
            u.checksum = 0;
            (u.to_bytes().to_vec(), NEXT_HEADER_UDP)
        }
        (Some(Transport::Icmpv6(i)), ChecksumLayer::Icmpv6) => {
            let mut i = i.clone();
            i.checksum = 0;
            (i.to_bytes().to_vec(), NEXT_HEADER_ICMPV6)
        }
        _ => return Err(PacketError::FieldAbsent(layer.field())),
    };
    let upper_len = stack.upper_len() as u32;
    let mut c = Checksum::new();
    c.add_bytes(&stack.network.src_addr());
    c.add_bytes(&stack.network.dst_addr());
    c.add_bytes(&upper_len.to_be_bytes());
    c.add_bytes(&[0, 0, 0, next_header]);
    c.add_bytes(&header);
    if let Some(a) = &stack.application {
        c.add_bytes(&a.to_bytes());
    }
    c.add_bytes(&stack.payload);
    let sum = c.finish();
    Ok(match layer {
        ChecksumLayer::Udp if sum == 0 => 0xFFFF,
        _ => sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn udp_packet(payload: &[u8]) -> Vec<u8> {
        let mut stack = HeaderStack {
            network: Ipv6Header {
                next_header: NEXT_HEADER_UDP,
                hop_limit: 255,
                src_prefix: 0x2001_0db8_000a_0000,
                src_iid: 0x0212_7401_0001_0101,
                dst_prefix: 0x2001_0db8_000b_0000,
                dst_iid: 0x1000,
                ..Default::default()
            },
            transport: Some(Transport::Udp(UdpHeader {
                src_port: 5683,
                dst_port: 5683,
                ..Default::default()
            })),
            application: None,
            payload: payload.to_vec(),
            direction: Direction::Up,
        };
        stack.refresh_lengths();
        stack.fill_checksum();
        serialize_stack(&stack).unwrap()
    }

    #[test]
    fn parses_minimal_udp_chain() {
        let bytes = udp_packet(&[]);
        assert_eq!(bytes.len(), 48);
        let s = parse_stack(&bytes, Direction::Up).unwrap();
        assert!(matches!(s.transport, Some(Transport::Udp(_))));
        assert!(s.payload.is_empty());
        assert!(s.application.is_none());
    }

    #[test]
    fn parses_minimal_icmpv6_chain() {
        let mut bytes = vec![0u8; 44];
        bytes[0] = 0x60;
        bytes[5] = 4;
        bytes[6] = NEXT_HEADER_ICMPV6;
        let s = parse_stack(&bytes, Direction::Down).unwrap();
        assert!(matches!(s.transport, Some(Transport::Icmpv6(_))));
        assert_eq!(s.header_len(), 44);
    }

    #[test]
    fn rejects_short_buffer() {
        let bytes = vec![0x60u8; 39];
        assert!(matches!(
            parse_stack(&bytes, Direction::Up),
            Err(PacketError::TruncatedHeader {
                needed: 40,
                available: 39,
                ..
            })
        ));
    }

    #[test]
    fn rejects_wrong_version() {
        let mut bytes = udp_packet(&[]);
        bytes[0] = 0x40;
        assert_eq!(
            parse_stack(&bytes, Direction::Up),
            Err(PacketError::BadVersion(4))
        );
    }

    #[test]
    fn truncated_udp_header() {
        let mut bytes = vec![0u8; 44];
        bytes[0] = 0x60;
        bytes[5] = 4;
        bytes[6] = NEXT_HEADER_UDP;
        assert!(matches!(
            parse_stack(&bytes, Direction::Up),
            Err(PacketError::TruncatedHeader {
                header: HeaderKind::Udp,
                ..
            })
        ));
    }

    #[test]
    fn unknown_next_header_is_payload() {
        let mut bytes = vec![0u8; 45];
        bytes[0] = 0x60;
        bytes[5] = 5;
        bytes[6] = 6; // TCP
        let s = parse_stack(&bytes, Direction::Up).unwrap();
        assert!(s.transport.is_none());
        assert_eq!(s.payload.len(), 5);
        assert_eq!(serialize_stack(&s).unwrap(), bytes);
    }

    #[test]
    fn stale_payload_length_is_rejected() {
        let mut bytes = udp_packet(b"abc");
        bytes[5] += 1;
        assert!(matches!(
            parse_stack(&bytes, Direction::Up),
            Err(PacketError::LengthMismatch {
                header: HeaderKind::Ipv6,
                ..
            })
        ));
    }

    #[test]
    fn coap_detected_on_port_5683() {
        // ver=1, type=CON, tkl=0, code GET, mid 0x1234, then payload
        let bytes = udp_packet(&[0x40, 0x01, 0x12, 0x34, 0xff]);
        let s = parse_stack(&bytes, Direction::Up).unwrap();
        let coap = s.application.as_ref().unwrap();
        assert_eq!((coap.version, coap.code, coap.message_id), (1, 1, 0x1234));
        assert_eq!(s.payload, vec![0xff]);
        assert_eq!(serialize_stack(&s).unwrap(), bytes);
    }

    #[test]
    fn serialize_length_arithmetic() {
        let s = parse_stack(&udp_packet(&[1, 2, 3]), Direction::Up).unwrap();
        let mut s2 = s.clone();
        s2.payload = vec![9; 5];
        let out = serialize_stack(&s2).unwrap();
        assert_eq!(out.len(), 53);
        assert_eq!(u16::from_be_bytes([out[4], out[5]]), 13);
        assert_eq!(u16::from_be_bytes([out[44], out[45]]), 13);
    }

    #[test]
    fn serialize_detects_inconsistent_chain() {
        let mut s = parse_stack(&udp_packet(&[]), Direction::Up).unwrap();
        s.network.next_header = NEXT_HEADER_ICMPV6;
        assert!(matches!(
            serialize_stack(&s),
            Err(PacketError::InconsistentChain(_))
        ));
    }

    #[test]
    fn field_access() {
        let s = parse_stack(&udp_packet(&[]), Direction::Up).unwrap();
        assert_eq!(
            get_field(&s, FieldId::Ipv6Version, 0).unwrap().to_string(),
            "0110"
        );
        let port = get_field(&s, FieldId::UdpSrcPort, 0).unwrap();
        assert_eq!((port.value(), port.width()), (0x1633, 16));
        assert_eq!(
            get_field(&s, FieldId::Ipv6FlowLabel, 0).unwrap().width(),
            20
        );
        assert_eq!(
            get_field(&s, FieldId::Icmpv6Type, 0),
            Err(PacketError::FieldAbsent(FieldId::Icmpv6Type))
        );
        assert!(matches!(
            get_field(&s, FieldId::UdpSrcPort, 1),
            Err(PacketError::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn header_widths_sum_to_header_sizes() {
        for kind in [
            HeaderKind::Ipv6,
            HeaderKind::Udp,
            HeaderKind::Icmpv6,
            HeaderKind::Coap,
        ] {
            let bits: usize = kind.fields().iter().map(|f| usize::from(f.width())).sum();
            assert_eq!(bits, kind.len() * 8, "{kind}");
            assert!(kind.fields().iter().all(|f| f.header() == kind));
        }
    }

    #[test]
    fn degenerate_icmpv6_checksum() {
        // All-zero addresses, type/code 0, empty body:
        // words summed are upper length 4 and next header 58.
        let mut bytes = vec![0u8; 44];
        bytes[0] = 0x60;
        bytes[5] = 4;
        bytes[6] = NEXT_HEADER_ICMPV6;
        let s = parse_stack(&bytes, Direction::Up).unwrap();
        assert_eq!(
            compute_checksum(&s, ChecksumLayer::Icmpv6).unwrap(),
            !(4u16 + 58)
        );
        assert_eq!(
            compute_checksum(&s, ChecksumLayer::Udp),
            Err(PacketError::FieldAbsent(FieldId::UdpChecksum))
        );
    }
}
