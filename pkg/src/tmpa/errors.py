class ContractViolation(ValueError):
    """Raised when an operation's preconditions are not met."""


def require(cond, msg):
    if not cond:
        raise ContractViolation(msg)
