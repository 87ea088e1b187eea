"""Exception hierarchy shared by every stratum module."""

from __future__ import annotations


class StratumError(Exception):
    """Base class for all errors raised by the stratum middleware."""


# model


class UnencodableValue(StratumError):
    pass


class DecodeError(StratumError):
    pass


class VerificationError(StratumError):
    pass


class UnknownProvider(VerificationError):
    pass


class HashMismatch(VerificationError):
    pass


class BadSignature(VerificationError):
    pass


class ValidationError(StratumError):
    pass


class CycleDetected(ValidationError):
    pass


class PortTypeMismatch(ValidationError):
    pass


class UnresolvedActor(ValidationError):
    pass


class DanglingPort(ValidationError):
    pass


# repository


class RepositoryError(StratumError):
    pass


class DuplicateVersion(RepositoryError):
    pass


class Unverified(RepositoryError):
    pass


class IllegalTransition(RepositoryError):
    pass


class NotAuthorized(RepositoryError):
    pass


class UnknownActor(RepositoryError):
    pass


class DependencyError(RepositoryError):
    pass


# interpreter


class ParseError(StratumError):
    def __init__(self, message: str, line: int = 0, column: int = 0) -> None:
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UnknownBuiltin(ParseError):
    pass


class ArityError(ParseError):
    pass


class TypeCheckError(StratumError):
    """Raised when an expression violates a builtin signature."""

    def __init__(self, message: str, expression: object = None) -> None:
        super().__init__(message)
        self.expression = expression


class UnboundIdentifier(TypeCheckError):
    pass


class EvalError(StratumError):
    pass


class DivByZero(EvalError):
    pass


class EmptyVector(EvalError):
    pass


class IndexOutOfRange(EvalError):
    pass


class NonFiniteResult(EvalError):
    pass


class InvalidArgument(EvalError):
    pass


class ExecError(StratumError):
    pass


class NodeEvalError(ExecError):
    def __init__(self, node_id: str, inner: BaseException) -> None:
        super().__init__(f"node {node_id!r} failed: {inner}")
        self.node_id = node_id
        self.inner = inner


class RemoteUnavailable(ExecError):
    def __init__(self, domain_id: str, reason: str = "") -> None:
        super().__init__(f"domain {domain_id!r} unavailable{': ' + reason if reason else ''}")
        self.domain_id = domain_id


class PolicyRevoked(ExecError):
    pass


class NoAdmissibleDomain(StratumError):
    def __init__(self, node_id: str) -> None:
        super().__init__(f"no admissible domain for node {node_id!r}")
        self.node_id = node_id


# management


class Denied(StratumError):
    def __init__(self, rule_id: str | None = None, message: str = "") -> None:
        super().__init__(message or f"denied by rule {rule_id!r}" if rule_id else message or "denied by default")
        self.rule_id = rule_id


class PolicyError(StratumError):
    pass


class DuplicatePriority(PolicyError):
    pass


class StaleSample(StratumError):
    pass


# southbound


class DuplicateProbe(StratumError):
    pass


class InsufficientResources(StratumError):
    pass


# northbound


class InvalidSession(StratumError):
    pass


class UnknownService(StratumError):
    pass


class Suspended(StratumError):
    pass


# westbound


class HandshakeError(StratumError):
    pass


class NoTrustedBroker(HandshakeError):
    pass


class IllegalState(HandshakeError):
    pass


class FetchFailed(HandshakeError):
    pass


class IngestError(StratumError):
    pass


class NoMatchingActor(IngestError):
    pass


# eastbound


class AssocError(StratumError):
    pass


class UntrustedPeer(AssocError):
    pass


class NoCommonTopology(AssocError):
    pass


class BadNonceSignature(AssocError):
    pass


class Timeout(StratumError):
    pass


class RedeployError(StratumError):
    pass


class NotAssociated(RedeployError):
    pass


class PeerRejected(RedeployError):
    pass


class TransferFailed(RedeployError):
    pass


class RemoteError(StratumError):
    pass


class LinkDown(RemoteError):
    pass


class PolicyVeto(RemoteError):
    pass


# broker


class BrokerError(StratumError):
    pass


class DuplicateProvider(BrokerError):
    pass


class BadCredentials(BrokerError):
    pass


class Unregistered(BrokerError):
    pass


class RelayError(BrokerError):
    pass


class UnknownEntry(RelayError):
    pass


# harness


class ScenarioError(StratumError):
    pass


class AssertionFailed(StratumError):
    def __init__(self, failures: list[str]) -> None:
        super().__init__("; ".join(failures))
        self.failures = failures
