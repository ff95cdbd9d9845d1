"""Exception hierarchy; each category maps to a CLI exit code."""


class PatternIDError(Exception):
    exit_code = 1


class ConfigError(PatternIDError, ValueError):
    exit_code = 2


class DataError(PatternIDError, ValueError):
    exit_code = 3


class TrainingError(PatternIDError, RuntimeError):
    exit_code = 4


class PrerequisiteError(PatternIDError, FileNotFoundError):
    """A command ran before the command that produces its inputs."""

    exit_code = 5

    def __init__(self, missing, producer):
        self.missing = str(missing)
        self.producer = producer
        super().__init__(f"missing {self.missing}; run `patternid {producer}` first")
