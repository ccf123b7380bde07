//! Static context header compression for IPv6, UDP, ICMPv6 and CoAP over
//! low-power wide-area links, in flat and layered rule-context flavours.
//!
//! * [`packet`] parses and serializes header stacks and exposes every field.
//! * [`context`] holds rules, contexts and the segmented rule-ID codec.
//! * [`engine`] matches, selects, compresses and decompresses.
//! * [`document`] and [`registry`] persist contexts and map device short
//!   rule IDs to network-wide long IDs.
//! * [`metrics`] computes compression factors and LoRa airtime.
//! * [`scenario`] replays the built-in RPL/UDP benchmark.

pub mod bits;
pub mod catalog;
pub mod checksum;
pub mod context;
pub mod document;
pub mod engine;
pub mod metrics;
pub mod packet;
pub mod registry;
pub mod scenario;

pub use bits::Bits;
pub use context::{
    CdAction, Context, DirectionIndicator, FieldDescriptor, FlatContext, FlatRule, LayerRule,
    LayeredContext, MatchingOperator, Mode, RuleIdLayout, SegmentIds,
};
pub use document::{load_context, save_context_binary, save_context_text, DocumentError};
pub use engine::{compress, decompress, CompressedPacket, DecompressionEnvironment, EngineError};
pub use metrics::{compression_factor, lora_time_on_air, LoraParams};
pub use packet::{parse_stack, serialize_stack, Direction, FieldId, HeaderStack, Layer};
pub use registry::{DeviceAddress, RuleRegistry, RuleSlot, StoredRule};
