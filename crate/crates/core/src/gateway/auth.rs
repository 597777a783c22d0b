//! Bearer tokens: `<player_id>.<hex HMAC-SHA256 of player_id>`.
//!
//! Tokens carry no expiry; rotating the server key revokes all of them.

use hmac::{Hmac, KeyInit, Mac};
use rand::RngCore;
use sha2::Sha256;

use crate::progression::PlayerId;

type HmacSha256 = Hmac<Sha256>;

#[derive(Clone)]
pub struct TokenSigner {
    key: Vec<u8>,
}

impl std::fmt::Debug for TokenSigner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TokenSigner(..)")
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

impl TokenSigner {
    pub fn new(key: impl Into<Vec<u8>>) -> Self {
        Self { key: key.into() }
    }

    pub fn random() -> Self {
        let mut key = vec![0u8; 32];
        rand::rng().fill_bytes(&mut key);
        Self { key }
    }

    fn mac(&self) -> HmacSha256 {
        <HmacSha256 as KeyInit>::new_from_slice(&self.key).expect("HMAC accepts any key length")
    }

    pub fn issue(&self, player: &PlayerId) -> String {
        let mut mac = self.mac();
        mac.update(player.as_str().as_bytes());
        format!("{}.{}", player.as_str(), hex(&mac.finalize().into_bytes()))
    }

    /// The player a token was issued to, if the signature checks out.
    pub fn verify(&self, token: &str) -> Option<PlayerId> {
        let (player, sig) = token.rsplit_once('.')?;
        let sig = unhex(sig)?;
        let mut mac = self.mac();
        mac.update(player.as_bytes());
        mac.verify_slice(&sig).ok()?;
        Some(PlayerId::new(player))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn issue_verify_and_reject() {
        let s = TokenSigner::new(b"k".to_vec());
        let p = PlayerId::new("abc123");
        let t = s.issue(&p);
        assert_eq!(s.verify(&t), Some(p));
        assert_eq!(s.verify(&t.replace("abc123", "abc124")), None);
        assert_eq!(TokenSigner::new(b"other".to_vec()).verify(&t), None);
        assert_eq!(s.verify("nodot"), None);
        assert_eq!(s.verify("abc.zz"), None);
    }
}
