from typing import Optional


class NextPoiError(Exception):
    def __init__(self, msg: Optional[str] = None):
        super().__init__(msg or "There was an error while running the benchmark.")

    def user_error(self) -> str:
        return str(self)


class MalformedRecord(NextPoiError):
    """A check-in line (or persisted result line) that cannot be parsed"""

    def __init__(self, reason: str, line_number: Optional[int] = None, source: str = "input"):
        self.reason = reason
        self.line_number = line_number
        self.source = source
        where = f"{source} line {line_number}" if line_number is not None else source
        super().__init__(f"Malformed record at {where}: {reason}")


class DatasetIOError(NextPoiError):
    def __init__(self, path, cause: Exception):
        self.path = path
        super().__init__(f"Unable to read dataset {str(path)!r}: {cause}")


class EmptyDataset(NextPoiError):
    def __init__(self, what: str = "dataset"):
        super().__init__(f"The {what} holds no usable check-ins.")


class TrajectoryTooShort(NextPoiError):
    def __init__(self, trajectory_id: str, length: int):
        self.trajectory_id = trajectory_id
        self.length = length
        super().__init__(
            f"Trajectory {trajectory_id!r} has {length} check-in(s); at least 2 are needed"
        )


class UnknownPoi(NextPoiError):
    def __init__(self, poi_id: str):
        self.poi_id = poi_id
        super().__init__(f"POI {poi_id!r} is not in the catalog")


class EmptyContext(NextPoiError):
    def __init__(self, trajectory_id: str = ""):
        super().__init__(f"Test case {trajectory_id!r} has no context check-ins")


class EmptyOutcomes(NextPoiError):
    def __init__(self):
        super().__init__("No evaluation outcomes to aggregate.")


class ConfigurationError(NextPoiError):
    pass


class ResultFileError(NextPoiError):
    def __init__(self, path, cause: Exception):
        self.path = path
        super().__init__(f"Unable to access result file {str(path)!r}: {cause}")


class ResumeMismatch(NextPoiError):
    """The result file holds records for test cases the current run would not select"""

    def __init__(self, path, stray: int):
        self.path = path
        self.stray = stray
        super().__init__(
            f"Result file {str(path)!r} holds {stray} record(s) outside the current test-case "
            "selection; resume with the --seed and --max-test-cases it was written with, "
            "or choose a new --out"
        )
