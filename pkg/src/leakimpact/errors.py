"""Exception hierarchy. The CLI maps each family to an exit code."""


class LeakImpactError(Exception):
    exit_code = 1


class ConfigError(LeakImpactError):
    exit_code = 1


class DataError(LeakImpactError):
    exit_code = 2


class AUCUndefinedError(DataError):
    def __init__(self, n_pos, n_neg):
        super().__init__(f"AUC undefined: need both classes (n_pos={n_pos}, n_neg={n_neg})")
        self.n_pos = n_pos
        self.n_neg = n_neg


class SchemaError(LeakImpactError):
    exit_code = 1


class NumericError(LeakImpactError):
    exit_code = 3

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state
