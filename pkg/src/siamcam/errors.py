"""Exception types. Every error carries a short machine-greppable code."""


class SiamCamError(Exception):
    code = "error"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def one_line(self) -> str:
        msg = " ".join(str(self).split())
        return f"error[{self.code}]: {msg}"


class ConfigError(SiamCamError):
    code = "config"


class DataError(SiamCamError):
    code = "data"


class ModelError(SiamCamError):
    code = "model"


class TrainingError(SiamCamError):
    code = "training"


class ExplainError(SiamCamError):
    code = "explain"
