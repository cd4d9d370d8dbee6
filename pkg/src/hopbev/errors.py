"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ShapeError(ValueError):
    """Tensor/grid shape does not match the declared contract."""


class ArityError(ValueError):
    """Wrong number of inputs for an operation."""


class InvariantError(ValueError):
    """A documented invariant was violated by the caller."""


class FormatError(IOError):
    """On-disk container is malformed (magic, header, truncation, version)."""


class ChecksumError(FormatError):
    """Stored checksum does not match the recomputed one."""


class ArchitectureMismatchError(ValueError):
    """Checkpoint parameter index is incompatible with the model."""

    def __init__(self, mismatches):
        self.mismatches = list(mismatches)
        lines = ", ".join(f"{name}: {detail}" for name, detail in self.mismatches)
        super().__init__(f"incompatible parameter arrays: {lines}")


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite loss; carries a diagnostic dump."""

    def __init__(self, dump):
        self.dump = dict(dump)
        super().__init__(f"non-finite loss at step {self.dump.get('step')}: {self.dump}")
