//! Sapp measurement and local attestation reports.
//!
//! Every variable-length field is framed as an 8-byte little-endian length
//! followed by the bytes, so distinct field sequences never encode alike.
//!
//! ```text
//! measurement = SHA-256( LP(image) || LP(policy) || LP(peripherals) )
//!   policy      = u64le(min_runtime_ms) || u64le(window_ms)
//!   peripherals = LP(name_0) || LP(name_1) || ...   (sorted, deduplicated)
//! tag = HMAC-SHA-256( device_secret,
//!         LP(measurement) || LP(nonce) || LP(u64le(session)) || LP(u64le(mem)) )
//! ```

use std::fmt;
use std::str::FromStr;

use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::policy::SchedulingPolicy;

type HmacSha256 = Hmac<Sha256>;

pub type Nonce = [u8; 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Measurement(pub [u8; 32]);

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Device root key. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct DeviceSecret(pub [u8; 32]);

impl fmt::Debug for DeviceSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DeviceSecret(..)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttestationReport {
    pub measurement: Measurement,
    pub nonce: Nonce,
    pub boot_session: u64,
    pub mem_size: u64,
    pub tag: [u8; 32],
}

impl fmt::Display for AttestationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "report measurement={} nonce={} session={} mem={} tag={}",
            self.measurement,
            hex::encode(self.nonce),
            self.boot_session,
            self.mem_size,
            hex::encode(self.tag)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed report line: {0}")]
pub struct ReportParseError(String);

fn parse_hex32(field: &str, value: &str) -> Result<[u8; 32], ReportParseError> {
    let bytes = hex::decode(value).map_err(|e| ReportParseError(format!("{field}: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| ReportParseError(format!("{field}: expected 32 bytes")))
}

impl FromStr for AttestationReport {
    type Err = ReportParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split_whitespace();
        if parts.next() != Some("report") {
            return Err(ReportParseError("missing `report` prefix".into()));
        }
        let mut field = |key: &str| -> Result<String, ReportParseError> {
            let kv = parts
                .next()
                .ok_or_else(|| ReportParseError(format!("missing {key}")))?;
            kv.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| ReportParseError(format!("expected {key}=, got {kv}")))
        };
        let measurement = Measurement(parse_hex32("measurement", &field("measurement")?)?);
        let nonce = parse_hex32("nonce", &field("nonce")?)?;
        let boot_session = field("session")?
            .parse()
            .map_err(|e| ReportParseError(format!("session: {e}")))?;
        let mem_size = field("mem")?
            .parse()
            .map_err(|e| ReportParseError(format!("mem: {e}")))?;
        let tag = parse_hex32("tag", &field("tag")?)?;
        Ok(Self {
            measurement,
            nonce,
            boot_session,
            mem_size,
            tag,
        })
    }
}

/// Appends `LP(bytes)`.
pub fn frame(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn encode_policy(policy: &SchedulingPolicy) -> [u8; 16] {
    let mut out = [0u8; 16];
    out[..8].copy_from_slice(&policy.min_runtime_ms.to_le_bytes());
    out[8..].copy_from_slice(&policy.window_ms.to_le_bytes());
    out
}

/// Canonical peripheral-set encoding: sorted, deduplicated, each name framed.
pub fn encode_peripherals<S: AsRef<str>>(names: &[S]) -> Vec<u8> {
    let mut sorted: Vec<&str> = names.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::new();
    for name in sorted {
        frame(&mut out, name.as_bytes());
    }
    out
}

pub fn measure_encoded(image: &[u8], policy: &[u8], peripherals: &[u8]) -> Measurement {
    let mut buf = Vec::with_capacity(24 + image.len() + policy.len() + peripherals.len());
    frame(&mut buf, image);
    frame(&mut buf, policy);
    frame(&mut buf, peripherals);
    Measurement(Sha256::digest(&buf).into())
}

pub fn measure<S: AsRef<str>>(
    image: &[u8],
    policy: &SchedulingPolicy,
    peripherals: &[S],
) -> Measurement {
    measure_encoded(image, &encode_policy(policy), &encode_peripherals(peripherals))
}

fn tag_input(measurement: &Measurement, nonce: &Nonce, boot_session: u64, mem_size: u64) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 * 8 + 32 + 32 + 16);
    frame(&mut buf, &measurement.0);
    frame(&mut buf, nonce);
    frame(&mut buf, &boot_session.to_le_bytes());
    frame(&mut buf, &mem_size.to_le_bytes());
    buf
}

fn mac(secret: &DeviceSecret) -> HmacSha256 {
    HmacSha256::new_from_slice(&secret.0).expect("HMAC accepts any key length")
}

pub fn build_report(
    measurement: Measurement,
    nonce: Nonce,
    boot_session: u64,
    mem_size: u64,
    secret: &DeviceSecret,
) -> AttestationReport {
    let mut m = mac(secret);
    m.update(&tag_input(&measurement, &nonce, boot_session, mem_size));
    AttestationReport {
        measurement,
        nonce,
        boot_session,
        mem_size,
        tag: m.finalize().into_bytes().into(),
    }
}

/// What the verifying user expects the report to cover. Encodings are kept
/// as raw bytes so a verifier can hold exactly what it measured.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedClaims {
    pub image: Vec<u8>,
    pub policy_encoding: Vec<u8>,
    pub peripherals_encoding: Vec<u8>,
    pub nonce: Nonce,
    pub boot_session: u64,
    pub mem_size: u64,
}

impl ExpectedClaims {
    pub fn new<S: AsRef<str>>(
        image: &[u8],
        policy: &SchedulingPolicy,
        peripherals: &[S],
        nonce: Nonce,
        boot_session: u64,
        mem_size: u64,
    ) -> Self {
        Self {
            image: image.to_vec(),
            policy_encoding: encode_policy(policy).to_vec(),
            peripherals_encoding: encode_peripherals(peripherals),
            nonce,
            boot_session,
            mem_size,
        }
    }
}

/// True iff the recomputed measurement and the authenticator both match.
/// Every comparison runs regardless of earlier outcomes.
pub fn verify_report(
    report: &AttestationReport,
    expected: &ExpectedClaims,
    secret: &DeviceSecret,
) -> bool {
    let measurement = measure_encoded(
        &expected.image,
        &expected.policy_encoding,
        &expected.peripherals_encoding,
    );
    let measurement_ok = measurement == report.measurement;
    let fields_ok = (report.nonce == expected.nonce)
        & (report.boot_session == expected.boot_session)
        & (report.mem_size == expected.mem_size);
    let mut m = mac(secret);
    m.update(&tag_input(
        &measurement,
        &expected.nonce,
        expected.boot_session,
        expected.mem_size,
    ));
    let tag_ok = m.verify_slice(&report.tag).is_ok();
    measurement_ok & fields_ok & tag_ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Golden values computed with Python's hashlib/hmac over the framing in
    // the module docs, independently of this implementation.
    const EMPTY_MEASUREMENT: &str =
        "b6178ad103927b751ab239952d01254fe18174542d99e2f21c1c19463c53f57a";
    // image "image", policy (20, 100), peripherals {ble0}
    const SAMPLE_MEASUREMENT: &str =
        "2bea3a7463f05157920f8127f355aac0b3646fdb18eb4d3fe6bb4b129ac0913e";
    // SAMPLE_MEASUREMENT, nonce 0x01 * 32, session 0, mem 65536, secret 0x42 * 32
    const SAMPLE_TAG: &str = "4f562b8504ba2c5cdd6bfcb5526ebc76bca3006da08a1204a16eaf683e1a0918";

    fn policy(min: u64, window: u64) -> SchedulingPolicy {
        SchedulingPolicy::new(min, window).unwrap()
    }

    fn secret() -> DeviceSecret {
        DeviceSecret([0x42; 32])
    }

    #[test]
    fn golden_empty_measurement() {
        let m = measure::<&str>(&[], &policy(0, 1), &[]);
        assert_eq!(m.to_string(), EMPTY_MEASUREMENT);
    }

    #[test]
    fn golden_sample_report() {
        let m = measure(b"image", &policy(20, 100), &["ble0"]);
        assert_eq!(m.to_string(), SAMPLE_MEASUREMENT);
        let r = build_report(m, [1; 32], 0, 65536, &secret());
        assert_eq!(hex::encode(r.tag), SAMPLE_TAG);
    }

    #[test]
    fn measurement_is_deterministic_and_order_free() {
        let p = policy(20, 100);
        assert_eq!(measure(b"img", &p, &["a", "b"]), measure(b"img", &p, &["a", "b"]));
        assert_eq!(measure(b"img", &p, &["a", "b"]), measure(b"img", &p, &["b", "a"]));
    }

    #[test]
    fn framing_separates_field_boundaries() {
        assert_ne!(measure_encoded(b"AB", b"C", b""), measure_encoded(b"A", b"BC", b""));
        assert_ne!(measure_encoded(b"", b"AB", b"C"), measure_encoded(b"", b"A", b"BC"));
        assert_ne!(encode_peripherals(&["ab", "c"]), encode_peripherals(&["a", "bc"]));
        assert_ne!(measure_encoded(b"A", b"", b""), measure_encoded(b"", b"A", b""));
    }

    #[test]
    fn report_round_trip_and_binding() {
        let p = policy(20, 100);
        let m = measure(b"image", &p, &["ble0"]);
        let s = secret();
        let r = build_report(m, [1; 32], 0, 65536, &s);
        let claims = ExpectedClaims::new(b"image", &p, &["ble0"], [1; 32], 0, 65536);
        assert!(verify_report(&r, &claims, &s));

        assert_ne!(r.tag, build_report(m, [2; 32], 0, 65536, &s).tag);
        assert_ne!(r.tag, build_report(m, [1; 32], 1, 65536, &s).tag);

        let mut wrong_nonce = claims.clone();
        wrong_nonce.nonce = [2; 32];
        assert!(!verify_report(&r, &wrong_nonce, &s));

        let mut flipped = r;
        flipped.measurement.0[0] ^= 1;
        assert!(!verify_report(&flipped, &claims, &s));

        assert!(!verify_report(&r, &claims, &DeviceSecret([0x43; 32])));
    }

    #[test]
    fn report_line_parses_back() {
        let r = build_report(Measurement([7; 32]), [9; 32], 3, 4096, &secret());
        let line = r.to_string();
        assert!(line.starts_with("report measurement=0707"));
        assert_eq!(line.parse::<AttestationReport>().unwrap(), r);
        assert!("report measurement=zz".parse::<AttestationReport>().is_err());
    }

    proptest! {
        #[test]
        fn single_bit_mutation_changes_measurement(
            image in proptest::collection::vec(any::<u8>(), 0..256),
            min in 0u64..100,
            bit in any::<proptest::sample::Index>(),
        ) {
            let p = policy(min, 100);
            let names = ["ble0", "gps0"];
            let mut bytes = image.clone();
            bytes.extend_from_slice(&encode_policy(&p));
            let per = encode_peripherals(&names);
            bytes.extend_from_slice(&per);
            let original = measure(&image, &p, &names);
            let i = bit.index(bytes.len() * 8);
            let (byte, mask) = (i / 8, 1u8 << (i % 8));
            let mut img = image.clone();
            let mut pol = encode_policy(&p).to_vec();
            let mut per = per.clone();
            if byte < img.len() {
                img[byte] ^= mask;
            } else if byte < img.len() + 16 {
                pol[byte - img.len()] ^= mask;
            } else {
                per[byte - img.len() - 16] ^= mask;
            }
            prop_assert_ne!(measure_encoded(&img, &pol, &per), original);
        }
    }
}
