"""Shared domain types, canonical encoding, hashing and signature verification."""

from stratum.model.codec import canonical_decode, canonical_encode, from_doc, to_doc
from stratum.model.composition import validate_composition
from stratum.model.signing import (
    Principal,
    build_package,
    content_hash,
    sign,
    sign_manifest,
    verify,
    verify_package,
)
from stratum.model.types import (
    AT_LEAST_ONE,
    ActorManifest,
    ActorPackage,
    Binding,
    Composition,
    CompositionNode,
    Edge,
    Identity,
    Kind,
    Port,
    Requirements,
    Role,
    TrustStore,
    TypedPlan,
    VerifiedPackage,
    VersionConstraint,
    Wire,
)
from stratum.model.values import Label, Scalar, Value, ValueType, Vector, format_value, same_bits

__all__ = [
    "AT_LEAST_ONE",
    "ActorManifest",
    "ActorPackage",
    "Binding",
    "Composition",
    "CompositionNode",
    "Edge",
    "Identity",
    "Kind",
    "Label",
    "Port",
    "Principal",
    "Requirements",
    "Role",
    "Scalar",
    "TrustStore",
    "TypedPlan",
    "Value",
    "ValueType",
    "Vector",
    "VerifiedPackage",
    "VersionConstraint",
    "Wire",
    "build_package",
    "canonical_decode",
    "canonical_encode",
    "content_hash",
    "format_value",
    "from_doc",
    "same_bits",
    "sign",
    "sign_manifest",
    "to_doc",
    "validate_composition",
    "verify",
    "verify_package",
]
