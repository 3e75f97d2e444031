"""Exception hierarchy shared by every pipeline module."""


class StageIdsError(Exception):
    """Base class; the CLI maps any subclass to a nonzero exit."""

    module = "stageids"

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


class MissingColumn(StageIdsError):
    module = "flow_model"

    def __init__(self, name):
        super().__init__(f"missing column: {name!r}")
        self.name = name


class UnmappedAttackType(StageIdsError):
    module = "flow_model"

    def __init__(self, token):
        super().__init__(f"attack type not covered by stage mapping: {token!r}")
        self.token = token


class EmptyDataset(StageIdsError):
    module = "flow_model"


class SchemaMismatch(StageIdsError):
    module = "flow_model"


class WindowTooSmall(StageIdsError):
    module = "graph"


class GraphTooDense(StageIdsError):
    module = "graph"


class DimensionMismatch(StageIdsError):
    module = "model"


class EmptyMask(StageIdsError):
    module = "gcn"


class DegenerateLabels(StageIdsError):
    module = "model"

    def __init__(self, msg, stage=None):
        super().__init__(msg)
        self.stage = stage


class NumericalDivergence(StageIdsError):
    module = "model"


class IndexOutOfRange(StageIdsError):
    module = "gcn"


class LengthMismatch(StageIdsError):
    module = "eval"


class DegenerateSplit(StageIdsError):
    module = "eval"


class InvalidConfig(StageIdsError):
    module = "config"


class BundleFormatError(StageIdsError):
    module = "bundle"
