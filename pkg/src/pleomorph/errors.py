"""Exception hierarchy shared by every module.

Each class maps to one CLI exit code (see ``pleomorph.cli``).
"""


class PleomorphError(Exception):
    exit_code = 1


class InvalidInputError(PleomorphError, ValueError):
    exit_code = 2


class InvalidShapeError(InvalidInputError):
    pass


class InvalidConfigError(InvalidInputError):
    pass


class InvalidSpecError(InvalidInputError):
    pass


class DegenerateInputError(InvalidInputError):
    pass


class UndefinedMetricError(InvalidInputError):
    pass


class NoTumorFoundError(PleomorphError):
    exit_code = 3


class TrainingDivergedError(PleomorphError):
    exit_code = 4

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged (non-finite loss) in epoch {epoch}")


class IntegrityError(PleomorphError):
    exit_code = 5

    def __init__(self, message, offset=None, parameter=None):
        self.offset = offset
        self.parameter = parameter
        where = []
        if parameter is not None:
            where.append(f"parameter {parameter!r}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
