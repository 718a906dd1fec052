"""Exception hierarchy shared by every lodestar module."""


class LodestarError(Exception):
    """Base class for all lodestar errors."""


class ValidationError(LodestarError):
    """Configuration or document problem detected before any load is applied."""


class InvalidDocument(ValidationError):
    """A script or scenario document is malformed."""


class UnbalancedTransaction(ValidationError):
    def __init__(self, name: str, index: int | None = None, reason: str = ""):
        self.name = name
        self.index = index
        where = f" at step {index}" if index is not None else ""
        super().__init__(f"unbalanced transaction {name!r}{where}{': ' + reason if reason else ''}")


class UnboundParameter(ValidationError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unbound parameter {name!r}")


class EmptyTable(ValidationError):
    def __init__(self, table: str):
        self.table = table
        super().__init__(f"parameter table {table!r} has no rows")


class UnknownRendezvous(ValidationError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"rendezvous {name!r} has no policy")


class MissingScript(ValidationError):
    def __init__(self, path):
        self.path = path
        super().__init__(f"script not found: {path}")


class InvalidSchedule(ValidationError):
    pass


class EmptySchedule(InvalidSchedule):
    pass


class EmptyScenario(ValidationError):
    pass


class CapacityExceeded(ValidationError):
    pass


class MissingAgent(ValidationError):
    """No connected agent carries a tag some group needs."""


class BindError(LodestarError):
    pass


class EmptyRecording(LodestarError):
    pass


class RequestError(LodestarError):
    """Connect, timeout or protocol failure of a single HTTP request."""


class AbortSignal(LodestarError):
    """The run was stopped while a vuser was executing."""


class ProtocolError(LodestarError):
    pass


class ConnectError(LodestarError):
    pass


class StaleRun(LodestarError):
    pass


class UnsupportedPlatform(LodestarError):
    pass


class NoData(LodestarError):
    pass


class AgentLost(LodestarError):
    """An agent vanished mid-run. ``result`` holds the partial RunResult."""

    def __init__(self, address: str, result=None):
        self.address = address
        self.result = result
        super().__init__(f"agent {address} lost mid-run")
