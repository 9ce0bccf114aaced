//! Simulated message authentication.
//!
//! Every module holds a secret key known only to the [`KeyRegistry`], which
//! belongs to the simulation harness. Modules sign through a [`Signer`]
//! capability bound to their own id, so a Byzantine module can lie but
//! cannot produce a tag that verifies under another module's id.

use std::sync::Arc;

use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;
use thiserror::Error;

use crate::canonical::{digest, Canonical, CanonicalWriter, Digest};

pub type ModuleId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("module {0} is not registered")]
    UnknownModule(ModuleId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AuthTag {
    pub signer: ModuleId,
    pub payload_digest: Digest,
    pub tag: [u8; 32],
}

impl Canonical for AuthTag {
    fn write_canonical(&self, w: &mut CanonicalWriter) {
        w.u32(self.signer as u32).digest(&self.payload_digest);
        w.bytes(&self.tag);
    }
}

pub struct KeyRegistry {
    secrets: Vec<[u8; 32]>,
}

impl std::fmt::Debug for KeyRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyRegistry")
            .field("modules", &self.secrets.len())
            .finish_non_exhaustive()
    }
}

impl KeyRegistry {
    /// Derives one secret per module from the scenario seed.
    pub fn generate(modules: usize, seed: u64) -> Self {
        let secrets = (0..modules)
            .map(|id| {
                let mut w = CanonicalWriter::new();
                w.str("bft-ensemble/module-key").u64(seed).u32(id as u32);
                *digest(&w.finish()).as_bytes()
            })
            .collect();
        Self { secrets }
    }

    pub fn len(&self) -> usize {
        self.secrets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.secrets.is_empty()
    }

    fn mac(&self, signer: ModuleId, payload_digest: &Digest) -> Result<Hmac<Sha256>, AuthError> {
        let key = self
            .secrets
            .get(signer)
            .ok_or(AuthError::UnknownModule(signer))?;
        let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
        mac.update(&(signer as u32).to_be_bytes());
        mac.update(payload_digest.as_bytes());
        Ok(mac)
    }

    pub fn sign(&self, signer: ModuleId, payload: &[u8]) -> Result<AuthTag, AuthError> {
        let payload_digest = digest(payload);
        let mac = self.mac(signer, &payload_digest)?;
        Ok(AuthTag {
            signer,
            payload_digest,
            tag: mac.finalize().into_bytes().into(),
        })
    }

    pub fn verify(&self, tag: &AuthTag, signer: ModuleId, payload: &[u8]) -> bool {
        if tag.signer != signer || tag.payload_digest != digest(payload) {
            return false;
        }
        match self.mac(signer, &tag.payload_digest) {
            Ok(mac) => mac.verify_slice(&tag.tag).is_ok(),
            Err(_) => false,
        }
    }

    /// Hands out the signing capability for one module.
    pub fn signer(self: &Arc<Self>, id: ModuleId) -> Result<Signer, AuthError> {
        if id >= self.secrets.len() {
            return Err(AuthError::UnknownModule(id));
        }
        Ok(Signer {
            id,
            registry: Arc::clone(self),
        })
    }
}

#[derive(Clone)]
pub struct Signer {
    id: ModuleId,
    registry: Arc<KeyRegistry>,
}

impl std::fmt::Debug for Signer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Signer({})", self.id)
    }
}

impl Signer {
    pub fn id(&self) -> ModuleId {
        self.id
    }

    pub fn sign(&self, payload: &[u8]) -> AuthTag {
        self.registry
            .sign(self.id, payload)
            .expect("signer id checked at construction")
    }

    pub fn registry(&self) -> &Arc<KeyRegistry> {
        &self.registry
    }
}

/// A message body together with its author's tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Signed<T> {
    pub body: T,
    pub tag: AuthTag,
}

impl<T: Canonical> Signed<T> {
    pub fn new(body: T, signer: &Signer) -> Self {
        let tag = signer.sign(&body.canonical_bytes());
        Self { body, tag }
    }

    pub fn signer(&self) -> ModuleId {
        self.tag.signer
    }

    pub fn verify(&self, registry: &KeyRegistry) -> bool {
        registry.verify(&self.tag, self.tag.signer, &self.body.canonical_bytes())
    }
}

impl<T: Canonical> Canonical for Signed<T> {
    fn write_canonical(&self, w: &mut CanonicalWriter) {
        self.body.write_canonical(w);
        self.tag.write_canonical(w);
    }
}
