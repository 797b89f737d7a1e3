class CardioError(Exception):
    exit_code = 1


class ConfigError(CardioError):
    exit_code = 2


class DataError(CardioError):
    exit_code = 3


class NumericError(CardioError):
    exit_code = 4


class InvalidCode(ConfigError):
    pass


class InvalidSpacing(ConfigError):
    pass


class InvalidNSvd(ConfigError):
    pass


class IoError(DataError):
    pass


class MalformedHeader(DataError):
    pass


class UnsupportedDatatype(DataError):
    pass


class GeometryMismatch(DataError):
    pass


class NonFiniteData(DataError):
    pass


class EmptyMask(DataError):
    pass


class EmptySurface(DataError):
    pass


class EmptyCohort(DataError):
    pass


class ColumnMismatch(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class InsufficientData(DataError):
    pass


class StageError(DataError):
    def __init__(self, stage, subject, cause):
        self.stage = stage
        self.subject = subject
        self.cause = cause
        where = "stage '{}'".format(stage)
        if subject is not None:
            where += ", subject '{}'".format(subject)
        super().__init__("{}: {}".format(where, cause))
        # keep the exit code of the underlying failure
        self.exit_code = getattr(cause, "exit_code", DataError.exit_code)

    def __reduce__(self):
        return (StageError, (self.stage, self.subject, self.cause))


class NonFiniteLoss(NumericError):
    pass


class DegenerateShape(UserWarning):
    pass


class NonConvergence(UserWarning):
    pass


def test_stage_error_keeps_exit_code_and_pickles():
    import pickle
    err = StageError("radiomics", "sub-003", NonFiniteLoss("loss became nan"))
    assert err.exit_code == 4
    assert "stage 'radiomics', subject 'sub-003'" in str(err)
    back = pickle.loads(pickle.dumps(err))
    assert (back.stage, back.subject, back.exit_code, str(back)) == ("radiomics", "sub-003", 4, str(err))
    assert StageError("atlas", None, ValueError("x")).exit_code == 3
