"""Pluggable detached-signature schemes, content hashing and package verification."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Protocol

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from stratum.errors import BadSignature, HashMismatch, UnknownProvider
from stratum.model.codec import signing_bytes
from stratum.model.types import ActorManifest, ActorPackage, Identity, Role, TrustStore, VerifiedPackage


def content_hash(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


class SignatureScheme(Protocol):
    name: str

    def public_key(self, private_key: bytes) -> bytes: ...

    def sign(self, data: bytes, private_key: bytes) -> bytes: ...

    def verify(self, data: bytes, signature: bytes, public_key: bytes) -> bool: ...


class Ed25519Scheme:
    """Deterministic Ed25519; private keys are raw 32-byte seeds."""

    name = "ed25519"

    def public_key(self, private_key: bytes) -> bytes:
        sk = Ed25519PrivateKey.from_private_bytes(private_key)
        return sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    def sign(self, data: bytes, private_key: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(private_key).sign(data)

    def verify(self, data: bytes, signature: bytes, public_key: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
        except (InvalidSignature, ValueError):
            return False
        return True


SCHEME: SignatureScheme = Ed25519Scheme()


def sign(data: bytes, private_key: bytes) -> bytes:
    return SCHEME.sign(data, private_key)


def verify(data: bytes, signature: bytes, public_key: bytes) -> bool:
    return SCHEME.verify(data, signature, public_key)


@dataclass(frozen=True)
class Principal:
    """An identity together with its private signing key."""

    identity: Identity
    private_key: bytes

    @classmethod
    def derive(cls, principal_id: str, role: Role | str, seed: int | str = 0) -> "Principal":
        # deterministic keys keep simulations reproducible
        sk = hashlib.sha256(f"stratum-key|{seed}|{principal_id}".encode()).digest()
        return cls(Identity(principal_id, SCHEME.public_key(sk), Role(role)), sk)

    @property
    def principal_id(self) -> str:
        return self.identity.principal_id

    def sign(self, data: bytes) -> bytes:
        return SCHEME.sign(data, self.private_key)


def sign_manifest(manifest: ActorManifest, private_key: bytes) -> ActorManifest:
    return replace(manifest, signature=SCHEME.sign(signing_bytes(manifest), private_key))


def build_package(manifest: ActorManifest, payload: bytes, private_key: bytes) -> ActorPackage:
    """Bind ``payload`` into ``manifest`` via its hash and sign the result."""
    bound = replace(manifest, behavior_hash=content_hash(payload), signature=b"")
    return ActorPackage(sign_manifest(bound, private_key), payload)


def verify_manifest_signature(manifest: ActorManifest, trust: TrustStore) -> None:
    ident = trust.get(manifest.provider_id)
    if ident is None:
        raise UnknownProvider(f"provider {manifest.provider_id!r} not in trust store")
    if not SCHEME.verify(signing_bytes(manifest), manifest.signature, ident.public_key):
        raise BadSignature(f"signature on {manifest.service_id} does not verify")


def verify_package(pkg: ActorPackage, trust: TrustStore) -> VerifiedPackage:
    if len(trust) == 0:
        raise UnknownProvider("empty trust store")
    m = pkg.manifest
    if trust.get(m.provider_id) is None:
        raise UnknownProvider(f"provider {m.provider_id!r} not in trust store")
    if content_hash(pkg.payload) != m.behavior_hash:
        raise HashMismatch(f"payload hash differs from behavior_hash of {m.service_id}")
    verify_manifest_signature(m, trust)
    return VerifiedPackage(pkg)
