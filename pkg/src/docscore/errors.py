"""Exception hierarchy. The CLI maps each family to an exit code."""


class DocscoreError(Exception):
    exit_code = 2


class ConfigError(DocscoreError):
    """Bad or missing configuration, unusable input path, violated precondition."""

    exit_code = 1


class DivergenceError(DocscoreError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_good_epoch=None):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch


class IntegrityError(DocscoreError):
    """Persisted data failed a format, version, or checksum check."""

    exit_code = 3


class VersionError(IntegrityError):
    pass


class CorruptionError(IntegrityError):
    pass
