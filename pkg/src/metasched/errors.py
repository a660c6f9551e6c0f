"""Exception hierarchy shared by every layer.

Each exception carries a stable ``code`` that the wire protocol puts into
error replies, so clients can branch on it without parsing messages.
"""


class SchedulerError(Exception):
    code = "error"
    #: user errors map to CLI exit code 1, everything else to 2
    user_error = True


class InvalidArgument(SchedulerError, ValueError):
    code = "bad_request"


# core model
class ArithmeticOverflow(SchedulerError, OverflowError):
    code = "arithmetic_overflow"


class InsufficientResources(SchedulerError):
    code = "insufficient_resources"


class IllegalTransition(SchedulerError):
    code = "illegal_transition"

    def __init__(self, state, event):
        self.state = state
        self.event = event
        super().__init__(f"illegal transition: {event!r} from state {state}")


class ClockWentBackwards(SchedulerError):
    code = "clock_went_backwards"


# offer engine
class AlreadyRegistered(SchedulerError):
    code = "already_registered"


class UnknownAgent(SchedulerError, KeyError):
    code = "unknown_agent"


class OfferNotFound(SchedulerError, KeyError):
    code = "offer_not_found"


class OfferExpired(SchedulerError):
    code = "offer_expired"


class OverSubscription(SchedulerError):
    code = "over_subscription"


class JobNotQueued(SchedulerError):
    code = "job_not_queued"


class JobNotRunning(SchedulerError):
    code = "job_not_running"


# nat gateway
class PoolExhausted(SchedulerError):
    code = "pool_exhausted"


class DuplicateInternalEndpoint(SchedulerError):
    code = "duplicate_internal_endpoint"


class MappingNotFound(SchedulerError, KeyError):
    code = "mapping_not_found"


class ChannelDown(SchedulerError):
    code = "channel_down"
    user_error = False


# policy engine
class UnknownTenant(SchedulerError, KeyError):
    code = "unknown_tenant"


class UnknownCluster(SchedulerError, KeyError):
    code = "unknown_cluster"


class NeverFits(SchedulerError):
    code = "never_fits"


# meta-scheduler
class RequestUnsatisfiable(SchedulerError):
    code = "request_unsatisfiable"


class UnknownJob(SchedulerError, KeyError):
    code = "unknown_job"


class NotCancellable(SchedulerError):
    code = "not_cancellable"


# sim harness
class ConfigInvalid(SchedulerError):
    code = "config_invalid"


class TraceMalformed(SchedulerError):
    code = "trace_malformed"


# service
class BindFailed(SchedulerError):
    code = "bind_failed"
    user_error = False


class LogCorrupt(SchedulerError):
    code = "log_corrupt"
    user_error = False

    def __init__(self, line, reason=""):
        self.line = line
        super().__init__(f"event log corrupt at line {line}: {reason}".rstrip(": "))


class SnapshotCorrupt(SchedulerError):
    code = "snapshot_corrupt"
    user_error = False


class OversizeLine(SchedulerError):
    code = "oversize_line"


class MalformedJson(SchedulerError):
    code = "bad_request"


class UnknownType(SchedulerError):
    code = "unknown_type"


def __str_key_error(self):
    # KeyError.__str__ repr()s its argument; keep plain messages
    return Exception.__str__(self)


for _cls in (UnknownAgent, OfferNotFound, MappingNotFound, UnknownTenant,
             UnknownCluster, UnknownJob):
    _cls.__str__ = __str_key_error
