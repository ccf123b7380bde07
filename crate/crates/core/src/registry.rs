//! Network-side rule registry.
//!
//! The registry stores one copy of every distinct rule under a 16-bit long
//! ID. Each device picks a handful of those rules offline; provisioning
//! numbers them densely with short IDs that fit the device's rule-ID
//! layout, and records the short → long mapping so compressed frames from
//! that device can be decompressed at the network side.
//!
//! Mutations take `&mut self`; share a registry between threads behind a
//! `RwLock` so lookups can proceed concurrently between mutations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{
    validate_flat_rule, validate_layer_rule, Context, FieldDescriptor, FlatContext, FlatRule,
    LayerRule, LayeredContext, Mode, RuleIdLayout, Violation,
};
use crate::document::{
    decode_versioned, descriptors, encode_canonical, encode_text, field_entries, read_file,
    write_atomic, DocumentError, Encoding, FieldEntry, FORMAT_VERSION,
};
use crate::engine::RuleLookup;
use crate::packet::Layer;

/// Number of distinct 16-bit long IDs.
pub const DEFAULT_CAPACITY: usize = 1 << 16;

pub type LongId = u16;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry is full ({capacity} rules)")]
    RegistryFull { capacity: usize },
    #[error("rule is invalid: {}", .0[0])]
    InvalidRule(Vec<Violation>),
    #[error("long ID {0} is not registered")]
    UnknownLongId(LongId),
    #[error("long ID {0} selected more than once")]
    DuplicateSelection(LongId),
    #[error("selection mixes flat and per-layer rules")]
    MixedRuleKinds,
    #[error("{requested} rules selected for {scope} but only {available} short IDs are usable")]
    TooManyRules {
        scope: String,
        requested: usize,
        available: usize,
    },
    #[error("provisioned context is invalid: {}", .0[0])]
    InvalidContext(Vec<Violation>),
    #[error("device {0} is not provisioned")]
    UnknownDevice(DeviceAddress),
    #[error("device {device} has no rule at {slot}")]
    UnknownShortId {
        device: DeviceAddress,
        slot: RuleSlot,
    },
    #[error(transparent)]
    Document(#[from] DocumentError),
}

/// A rule as kept by the registry, independent of any device numbering.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StoredRule {
    Flat(Vec<FieldDescriptor>),
    Layer(Layer, Vec<FieldDescriptor>),
}

impl StoredRule {
    pub fn fields(&self) -> &[FieldDescriptor] {
        match self {
            StoredRule::Flat(f) | StoredRule::Layer(_, f) => f,
        }
    }

    pub fn layer(&self) -> Option<Layer> {
        match self {
            StoredRule::Flat(_) => None,
            StoredRule::Layer(l, _) => Some(*l),
        }
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        match self {
            StoredRule::Flat(fields) => validate_flat_rule(
                &FlatRule {
                    rule_id: 0,
                    fields: fields.clone(),
                },
                &mut out,
            ),
            StoredRule::Layer(layer, fields) => validate_layer_rule(
                &LayerRule {
                    local_id: 0,
                    layer: *layer,
                    fields: fields.clone(),
                },
                &mut out,
            ),
        }
        out
    }
}

impl From<&FlatRule> for StoredRule {
    fn from(r: &FlatRule) -> Self {
        StoredRule::Flat(r.fields.clone())
    }
}

impl From<&LayerRule> for StoredRule {
    fn from(r: &LayerRule) -> Self {
        StoredRule::Layer(r.layer, r.fields.clone())
    }
}

/// Short rule ID as transmitted by a device: a flat rule ID or one layer segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleSlot {
    #[serde(rename = "flat")]
    Flat(u32),
    #[serde(rename = "layer")]
    Layer(Layer, u32),
}

impl fmt::Display for RuleSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleSlot::Flat(id) => write!(f, "short ID {id}"),
            RuleSlot::Layer(layer, id) => write!(f, "{layer} short ID {id}"),
        }
    }
}

/// Link-layer address of a device.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceAddress(pub Vec<u8>);

impl DeviceAddress {
    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        hex::decode(s.trim()).map(DeviceAddress)
    }
}

impl fmt::Display for DeviceAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(&self.0))
    }
}

impl From<&[u8]> for DeviceAddress {
    fn from(b: &[u8]) -> Self {
        DeviceAddress(b.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceProfile {
    pub layout: RuleIdLayout,
    pub mode: Mode,
    pub slots: BTreeMap<RuleSlot, LongId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleRegistry {
    capacity: usize,
    rules: BTreeMap<LongId, StoredRule>,
    devices: BTreeMap<DeviceAddress, DeviceProfile>,
}

impl Default for RuleRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl RuleRegistry {
    pub fn new() -> Self {
        Self::with_capacity(DEFAULT_CAPACITY)
    }

    /// Registry holding at most `capacity` rules (clamped to the long-ID range).
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            capacity: capacity.min(DEFAULT_CAPACITY),
            rules: BTreeMap::new(),
            devices: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }

    pub fn rules(&self) -> impl Iterator<Item = (LongId, &StoredRule)> {
        self.rules.iter().map(|(&id, r)| (id, r))
    }

    pub fn rule(&self, id: LongId) -> Option<&StoredRule> {
        self.rules.get(&id)
    }

    pub fn devices(&self) -> impl Iterator<Item = (&DeviceAddress, &DeviceProfile)> {
        self.devices.iter()
    }

    pub fn device(&self, device: &DeviceAddress) -> Result<&DeviceProfile, RegistryError> {
        self.devices
            .get(device)
            .ok_or_else(|| RegistryError::UnknownDevice(device.clone()))
    }

    /// Stores `rule` once; an identical rule keeps its existing long ID.
    pub fn register_rule(&mut self, rule: StoredRule) -> Result<LongId, RegistryError> {
        let violations = rule.violations();
        if !violations.is_empty() {
            return Err(RegistryError::InvalidRule(violations));
        }
        if let Some((&id, _)) = self.rules.iter().find(|(_, r)| **r == rule) {
            return Ok(id);
        }
        let free = (0..self.capacity)
            .map(|i| i as LongId)
            .find(|id| !self.rules.contains_key(id))
            .ok_or(RegistryError::RegistryFull {
                capacity: self.capacity,
            })?;
        self.rules.insert(free, rule);
        Ok(free)
    }

    /// Builds the device context for `selection` and records its short IDs.
    ///
    /// Short IDs are assigned densely from 0 in selection order, per layer
    /// for layered selections. Provisioning a device again replaces its map.
    pub fn provision_device(
        &mut self,
        device: &DeviceAddress,
        selection: &[LongId],
        layout: RuleIdLayout,
    ) -> Result<(Context, BTreeMap<RuleSlot, LongId>), RegistryError> {
        let mut seen = BTreeSet::new();
        let mut chosen = Vec::with_capacity(selection.len());
        for &id in selection {
            if !seen.insert(id) {
                return Err(RegistryError::DuplicateSelection(id));
            }
            chosen.push((
                id,
                self.rules
                    .get(&id)
                    .ok_or(RegistryError::UnknownLongId(id))?,
            ));
        }
        let layered = chosen.iter().any(|(_, r)| r.layer().is_some());
        if layered && chosen.iter().any(|(_, r)| r.layer().is_none()) {
            return Err(RegistryError::MixedRuleKinds);
        }

        let mut slots = BTreeMap::new();
        let ctx: Context = if layered {
            let mut ctx = LayeredContext::new(layout);
            let mut next = BTreeMap::<Layer, u32>::new();
            for (long, rule) in &chosen {
                let StoredRule::Layer(layer, fields) = rule else {
                    unreachable!()
                };
                let short = next.entry(*layer).or_insert(0);
                slots.insert(RuleSlot::Layer(*layer, *short), *long);
                ctx.push(LayerRule {
                    local_id: *short,
                    layer: *layer,
                    fields: fields.clone(),
                });
                *short += 1;
            }
            for (layer, count) in next {
                let available = layout.reserved_segment(layer) as usize;
                if count as usize > available {
                    return Err(RegistryError::TooManyRules {
                        scope: format!("the {layer} segment"),
                        requested: count as usize,
                        available,
                    });
                }
            }
            ctx.into()
        } else {
            let available = layout.reserved_flat() as usize;
            if chosen.len() > available {
                return Err(RegistryError::TooManyRules {
                    scope: "the flat rule ID".into(),
                    requested: chosen.len(),
                    available,
                });
            }
            let rules = chosen
                .iter()
                .enumerate()
                .map(|(i, (long, rule))| {
                    slots.insert(RuleSlot::Flat(i as u32), *long);
                    FlatRule {
                        rule_id: i as u32,
                        fields: rule.fields().to_vec(),
                    }
                })
                .collect();
            FlatContext::new(rules, layout).into()
        };

        let violations = ctx.validate();
        if !violations.is_empty() {
            return Err(RegistryError::InvalidContext(violations));
        }
        self.devices.insert(
            device.clone(),
            DeviceProfile {
                layout,
                mode: ctx.mode(),
                slots: slots.clone(),
            },
        );
        Ok((ctx, slots))
    }

    /// The stored rule behind a device's short ID.
    pub fn resolve(
        &self,
        device: &DeviceAddress,
        slot: RuleSlot,
    ) -> Result<&StoredRule, RegistryError> {
        let profile = self.device(device)?;
        let long = profile
            .slots
            .get(&slot)
            .ok_or_else(|| RegistryError::UnknownShortId {
                device: device.clone(),
                slot,
            })?;
        Ok(self
            .rules
            .get(long)
            .expect("device maps only reference stored rules"))
    }

    /// Rule lookup in a device's short-ID space, for network-side decompression.
    pub fn device_view(&self, device: &DeviceAddress) -> Result<DeviceView<'_>, RegistryError> {
        Ok(DeviceView {
            registry: self,
            profile: self.device(device)?,
        })
    }

    /// Re-creates the context a device was provisioned with.
    pub fn device_context(&self, device: &DeviceAddress) -> Result<Context, RegistryError> {
        let profile = self.device(device)?;
        let rule = |long: &LongId| self.rules[long].fields().to_vec();
        Ok(match profile.mode {
            Mode::Flat => FlatContext::new(
                profile
                    .slots
                    .iter()
                    .filter_map(|(slot, long)| match slot {
                        RuleSlot::Flat(id) => Some(FlatRule {
                            rule_id: *id,
                            fields: rule(long),
                        }),
                        RuleSlot::Layer(..) => None,
                    })
                    .collect(),
                profile.layout,
            )
            .into(),
            Mode::Layered => {
                let mut ctx = LayeredContext::new(profile.layout);
                for (slot, long) in &profile.slots {
                    if let RuleSlot::Layer(layer, id) = slot {
                        ctx.push(LayerRule {
                            local_id: *id,
                            layer: *layer,
                            fields: rule(long),
                        });
                    }
                }
                ctx.into()
            }
        })
    }

    pub fn save(&self, encoding: Encoding) -> Result<Vec<u8>, RegistryError> {
        let doc = self.to_document();
        Ok(match encoding {
            Encoding::Binary => encode_canonical(&doc)?,
            Encoding::Text => encode_text(&doc)?,
        })
    }

    pub fn load(bytes: &[u8]) -> Result<Self, RegistryError> {
        let doc: RegistryDocument = decode_versioned(bytes)?;
        Self::from_document(doc)
    }

    /// Loads a registry file, or returns an empty registry if it does not exist.
    pub fn open(path: &Path) -> Result<Self, RegistryError> {
        if !path.exists() {
            return Ok(Self::new());
        }
        Self::load(&read_file(path)?)
    }

    /// Rewrites the registry file atomically.
    pub fn store(&self, path: &Path) -> Result<(), RegistryError> {
        let bytes = self.save(Encoding::for_path(path))?;
        Ok(write_atomic(path, &bytes)?)
    }

    fn to_document(&self) -> RegistryDocument {
        RegistryDocument {
            format_version: FORMAT_VERSION,
            capacity: self.capacity as u32,
            rules: self
                .rules
                .iter()
                .map(|(&long_id, r)| StoredEntry {
                    long_id,
                    layer: r.layer(),
                    fields: field_entries(r.fields()),
                })
                .collect(),
            devices: self
                .devices
                .iter()
                .map(|(addr, p)| DeviceEntry {
                    address: addr.to_string(),
                    mode: p.mode,
                    layout: p.layout,
                    slots: p
                        .slots
                        .iter()
                        .map(|(slot, &long_id)| {
                            let (layer, short_id) = match *slot {
                                RuleSlot::Flat(id) => (None, id),
                                RuleSlot::Layer(l, id) => (Some(l), id),
                            };
                            SlotEntry {
                                short_id,
                                layer,
                                long_id,
                            }
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn from_document(doc: RegistryDocument) -> Result<Self, RegistryError> {
        let malformed = |m: String| RegistryError::Document(DocumentError::MalformedDocument(m));
        let mut reg = Self::with_capacity(doc.capacity as usize);
        for e in doc.rules {
            let fields = descriptors(&e.fields);
            let rule = match e.layer {
                None => StoredRule::Flat(fields),
                Some(l) => StoredRule::Layer(l, fields),
            };
            let violations = rule.violations();
            if !violations.is_empty() {
                return Err(RegistryError::InvalidRule(violations));
            }
            if reg.rules.insert(e.long_id, rule).is_some() {
                return Err(malformed(format!("long ID {} stored twice", e.long_id)));
            }
        }
        for d in doc.devices {
            let address = DeviceAddress::from_hex(&d.address)
                .map_err(|e| malformed(format!("device address {:?}: {e}", d.address)))?;
            let mut slots = BTreeMap::new();
            for s in d.slots {
                if !reg.rules.contains_key(&s.long_id) {
                    return Err(RegistryError::UnknownLongId(s.long_id));
                }
                let slot = match s.layer {
                    None => RuleSlot::Flat(s.short_id),
                    Some(l) => RuleSlot::Layer(l, s.short_id),
                };
                slots.insert(slot, s.long_id);
            }
            reg.devices.insert(
                address,
                DeviceProfile {
                    layout: d.layout,
                    mode: d.mode,
                    slots,
                },
            );
        }
        Ok(reg)
    }
}

/// One device's short-ID space, resolving through the registry.
#[derive(Debug, Clone, Copy)]
pub struct DeviceView<'a> {
    registry: &'a RuleRegistry,
    profile: &'a DeviceProfile,
}

impl DeviceView<'_> {
    fn fields(&self, slot: RuleSlot) -> Option<&[FieldDescriptor]> {
        let long = self.profile.slots.get(&slot)?;
        self.registry.rules.get(long).map(StoredRule::fields)
    }
}

impl RuleLookup for DeviceView<'_> {
    fn layout(&self) -> &RuleIdLayout {
        &self.profile.layout
    }

    fn mode(&self) -> Mode {
        self.profile.mode
    }

    fn flat_fields(&self, rule_id: u32) -> Option<&[FieldDescriptor]> {
        self.fields(RuleSlot::Flat(rule_id))
    }

    fn layer_fields(&self, layer: Layer, local_id: u32) -> Option<&[FieldDescriptor]> {
        self.fields(RuleSlot::Layer(layer, local_id))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryDocument {
    format_version: u32,
    capacity: u32,
    rules: Vec<StoredEntry>,
    devices: Vec<DeviceEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredEntry {
    long_id: LongId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer: Option<Layer>,
    fields: Vec<FieldEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceEntry {
    address: String,
    mode: Mode,
    layout: RuleIdLayout,
    slots: Vec<SlotEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlotEntry {
    short_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer: Option<Layer>,
    long_id: LongId,
}
