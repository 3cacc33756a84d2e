//! Small value types shared by every subsystem.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use strum::{Display, EnumString, IntoStaticStr};
use subtle::ConstantTimeEq;

pub const SECS_PER_DAY: u64 = 86_400;

/// Simulated time, in whole seconds. Wall-clock time is never consulted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const fn secs(self) -> u64 {
        self.0
    }

    pub fn plus_secs(self, secs: u64) -> Self {
        Timestamp(self.0.saturating_add(secs))
    }

    pub fn plus_days(self, days: u64) -> Self {
        self.plus_secs(days.saturating_mul(SECS_PER_DAY))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Inclusive reporting window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub from: Timestamp,
    pub to: Timestamp,
}

impl Period {
    pub fn new(from: Timestamp, to: Timestamp) -> Self {
        Period { from, to }
    }

    pub fn contains(&self, at: Timestamp) -> bool {
        self.from <= at && at <= self.to
    }
}

/// How a principal reaches a project: full VPN context or the RDP jumpbox.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Display, EnumString, IntoStaticStr,
)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase", ascii_case_insensitive)]
pub enum AccessMode {
    Vpn,
    Rdp,
}

impl AccessMode {
    pub const ALL: [AccessMode; 2] = [AccessMode::Vpn, AccessMode::Rdp];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Display)]
#[serde(rename_all = "lowercase")]
#[strum(serialize_all = "lowercase")]
pub enum Verdict {
    Allow,
    Deny,
}

/// Identifier of the rule that produced a [`Decision`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Display, EnumString, IntoStaticStr)]
#[serde(rename_all = "kebab-case")]
#[strum(serialize_all = "kebab-case")]
pub enum Rule {
    // classification
    PublicTier,
    RestrictedRoleRule,
    RestrictedModeGrant,
    RestrictedNoGrant,
    SensitiveIndividualGrant,
    SensitiveNoIndividualGrant,
    PrincipalInactive,
    // reachability
    SameZone,
    GatewayIngress,
    ExceptionRule,
    OutsideEnclave,
    NoDirectIngress,
    NoGatewayPath,
    NoEgressPath,
    ZoneIsolation,
    ServiceNotOffered,
    SessionNotOpen,
    SessionNotAuthorized,
    EndpointDestroyed,
    // proxy
    ProxyWhitelisted,
    ProxyNotWhitelisted,
    MalformedUrl,
    // egress
    RdpClipboardDisabled,
    VpnClipboard,
    RdpNoEgress,
    VpnManagedEndpoint,
    UnmanagedEndpoint,
    // share ACLs
    AclGroupMember,
    AclShadowMember,
    AclNoMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub reason: Rule,
}

impl Decision {
    pub fn allow(reason: Rule) -> Self {
        Decision { verdict: Verdict::Allow, reason }
    }

    pub fn deny(reason: Rule) -> Self {
        Decision { verdict: Verdict::Deny, reason }
    }

    pub fn is_allow(&self) -> bool {
        self.verdict == Verdict::Allow
    }
}

/// SHA-256 content digest. Used both for image payloads and for the ledger chain.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest(out))
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A 128-bit single-session credential secret.
///
/// Deliberately not `Serialize`: nothing that builds a client-facing record can
/// embed one by accident.
#[derive(Clone, Copy, Hash, PartialEq, Eq)]
pub struct Secret(pub(crate) [u8; 16]);

impl Secret {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Secret(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 16];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Secret(out))
    }

    pub fn matches(&self, other: &Secret) -> bool {
        self.0.ct_eq(&other.0).into()
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(<redacted>)")
    }
}
