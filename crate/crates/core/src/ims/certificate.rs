use std::collections::BTreeSet;
use std::fmt::Write as _;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use hmac::{Hmac, Mac};
use sha2::Sha256;

type HmacSha256 = Hmac<Sha256>;

pub const NONCE_LEN: usize = 16;
pub const TAG_LEN: usize = 32;

/// Signed, expiring, nonce-bearing credential issued by the IMS.
///
/// Wire form is the base64 of
/// `v=1;sub=<id>;scope=<a,b>;iat=<ms>;exp=<ms>;nonce=<hex>;su=<0|1>;tag=<hex>`
/// where the tag is HMAC-SHA256 over everything before `;tag=`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthCertificate {
    pub subject: String,
    pub scope: BTreeSet<String>,
    pub issued_at: u64,
    pub expires_at: u64,
    pub nonce: [u8; NONCE_LEN],
    pub single_use: bool,
    pub tag: [u8; TAG_LEN],
}

/// The certificate could not be parsed into its canonical form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Undecodable;

impl AuthCertificate {
    /// The exact bytes covered by the tag.
    pub fn signed_payload(&self) -> String {
        let mut out = String::with_capacity(128);
        let _ = write!(
            out,
            "v=1;sub={};scope={};iat={};exp={};nonce={};su={}",
            self.subject,
            self.scope.iter().cloned().collect::<Vec<_>>().join(","),
            self.issued_at,
            self.expires_at,
            hex::encode(self.nonce),
            u8::from(self.single_use),
        );
        out
    }

    pub(crate) fn compute_tag(&self, key: &[u8; 32]) -> [u8; TAG_LEN] {
        let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
        mac.update(self.signed_payload().as_bytes());
        mac.finalize().into_bytes().into()
    }

    pub(crate) fn tag_verifies(&self, key: &[u8; 32]) -> bool {
        let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
        mac.update(self.signed_payload().as_bytes());
        mac.verify_slice(&self.tag).is_ok()
    }

    pub fn plaintext(&self) -> String {
        format!("{};tag={}", self.signed_payload(), hex::encode(self.tag))
    }

    pub fn encode(&self) -> String {
        STANDARD.encode(self.plaintext())
    }

    /// Parses the wire form. Anything other than the exact canonical
    /// rendering of some certificate is rejected, so two distinct encodings
    /// can never decode to the same certificate.
    pub fn decode(encoded: &[u8]) -> Result<Self, Undecodable> {
        let text = STANDARD.decode(encoded).map_err(|_| Undecodable)?;
        let text = String::from_utf8(text).map_err(|_| Undecodable)?;
        let cert = Self::parse_plaintext(&text)?;
        if cert.plaintext() != text {
            return Err(Undecodable);
        }
        Ok(cert)
    }

    fn parse_plaintext(text: &str) -> Result<Self, Undecodable> {
        let mut fields = text.split(';');
        let mut field = |name: &str| -> Result<&str, Undecodable> {
            fields
                .next()
                .and_then(|f| f.strip_prefix(name))
                .and_then(|f| f.strip_prefix('='))
                .ok_or(Undecodable)
        };
        if field("v")? != "1" {
            return Err(Undecodable);
        }
        let subject = field("sub")?.to_string();
        let scope_text = field("scope")?;
        let issued_at = field("iat")?.parse().map_err(|_| Undecodable)?;
        let expires_at = field("exp")?.parse().map_err(|_| Undecodable)?;
        let mut nonce = [0u8; NONCE_LEN];
        hex::decode_to_slice(field("nonce")?, &mut nonce).map_err(|_| Undecodable)?;
        let single_use = match field("su")? {
            "0" => false,
            "1" => true,
            _ => return Err(Undecodable),
        };
        let mut tag = [0u8; TAG_LEN];
        hex::decode_to_slice(field("tag")?, &mut tag).map_err(|_| Undecodable)?;
        if fields.next().is_some() {
            return Err(Undecodable);
        }
        if !super::valid_name(&subject) {
            return Err(Undecodable);
        }
        let scope: BTreeSet<String> = if scope_text.is_empty() {
            BTreeSet::new()
        } else {
            scope_text.split(',').map(str::to_string).collect()
        };
        if !scope.iter().all(|s| super::valid_name(s)) {
            return Err(Undecodable);
        }
        Ok(Self {
            subject,
            scope,
            issued_at,
            expires_at,
            nonce,
            single_use,
            tag,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(key: &[u8; 32]) -> AuthCertificate {
        let mut cert = AuthCertificate {
            subject: "alice".into(),
            scope: ["trading".to_string(), "banking".to_string()].into(),
            issued_at: 1_000,
            expires_at: 301_000,
            nonce: [7; NONCE_LEN],
            single_use: true,
            tag: [0; TAG_LEN],
        };
        cert.tag = cert.compute_tag(key);
        cert
    }

    #[test]
    fn wire_form_matches_layout() {
        let cert = sample(&[1; 32]);
        let text = cert.plaintext();
        assert!(text.starts_with(
            "v=1;sub=alice;scope=banking,trading;iat=1000;exp=301000;nonce=07070707070707070707070707070707;su=1;tag="
        ));
        assert_eq!(AuthCertificate::decode(cert.encode().as_bytes()).unwrap(), cert);
        assert!(cert.tag_verifies(&[1; 32]));
        assert!(!cert.tag_verifies(&[2; 32]));
    }

    #[test]
    fn non_canonical_renderings_rejected() {
        let cert = sample(&[1; 32]);
        let upper_tag = cert.plaintext().replace(&hex::encode(cert.tag), &hex::encode_upper(cert.tag));
        assert_eq!(AuthCertificate::decode(STANDARD.encode(upper_tag).as_bytes()), Err(Undecodable));
        let padded = cert.plaintext().replace("iat=1000", "iat=01000");
        assert_eq!(AuthCertificate::decode(STANDARD.encode(padded).as_bytes()), Err(Undecodable));
        let extra = format!("{};x=1", cert.plaintext());
        assert_eq!(AuthCertificate::decode(STANDARD.encode(extra).as_bytes()), Err(Undecodable));
        assert_eq!(AuthCertificate::decode(b"not base64!"), Err(Undecodable));
    }
}
