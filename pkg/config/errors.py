"""Exception hierarchy shared by every package in the repository."""


class CurlIpError(Exception):
    """Base class for all errors raised by this project."""


class ValidationError(CurlIpError):
    """Bad flags or configuration; the CLI exits with code 1."""


class UsageError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


# url_corpus

class MalformedUrl(CurlIpError):
    pass


class IoError(CurlIpError, OSError):
    pass


class SchemaError(CurlIpError):
    pass


class LabelError(CurlIpError):
    pass


class BadRatios(CurlIpError):
    pass


# tokenizer

class VocabTooSmall(CurlIpError):
    pass


class NoMaskablePositions(CurlIpError):
    pass


# ip_featurizer

class BadIp(CurlIpError):
    pass


class EmptyInput(CurlIpError):
    pass


# adversary

class NoDomain(CurlIpError):
    pass


# neural kernel and models

class ShapeMismatch(CurlIpError):
    pass


class DegenerateVector(CurlIpError):
    pass


class EmptyMaskSet(CurlIpError):
    pass


class CheckpointError(CurlIpError):
    pass


# evaluation

class LengthMismatch(CurlIpError):
    pass


class DegenerateLabels(CurlIpError):
    pass
