"""Exception types shared across gradlab modules."""


class GradlabError(Exception):
    """Base class for every error raised by gradlab."""


class InfeasibleAlignment(GradlabError):
    """No CTC path of the given length collapses to the transcript."""


class EnumerationTooLarge(GradlabError):
    pass


class ShapeMismatch(GradlabError, ValueError):
    pass


class ZeroGradient(GradlabError):
    """Cosine distance is undefined because one of the gradients vanished."""


class DegenerateStd(GradlabError):
    pass


class InsufficientCorpus(GradlabError):
    pass


class ConfigError(GradlabError, ValueError):
    pass
