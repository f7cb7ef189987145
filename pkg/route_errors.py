from typing import List, Optional, Tuple


class RoutingError(Exception):
    message: str
    code: int = 1
    param: str = None

    def __init__(self, message: str, code: int = None, param: str = None, internal_message: str = ''):
        super().__init__(message)
        self.message = message
        if code is not None:
            self.code = code
        self.param = param
        self.type = self.__class__.__name__
        self.internal_message = internal_message

    def __repr__(self):
        return "%s(message=%r, code=%d, param=%s)" % (
            self.__class__.__name__,
            self.message,
            self.code,
            self.param,
        )


class InvalidInputError(RoutingError):
    code: int = 1


class OutOfDomainError(InvalidInputError):
    pass


class RuleViolationError(InvalidInputError):
    pass


class RefusalError(InvalidInputError):
    pass


class NoFeasibleSolutionError(RoutingError):
    code: int = 2


class InternalError(RoutingError):
    code: int = 3


# (file, line, field, message)
Issue = Tuple[str, Optional[int], str, str]


class ScenarioError(InvalidInputError):
    """ Collects every problem found while loading a scenario, not just the first. """

    def __init__(self, issues: List[Issue], internal_message: str = ''):
        self.issues = list(issues)
        lines = [format_issue(i) for i in self.issues]
        super().__init__(f"{len(lines)} problem(s):\n  " + "\n  ".join(lines), internal_message=internal_message)


def format_issue(issue: Issue) -> str:
    fname, line, field, msg = issue
    where = fname if line is None else f"{fname}:{line}"
    return f"{where}: {field}: {msg}" if field else f"{where}: {msg}"
