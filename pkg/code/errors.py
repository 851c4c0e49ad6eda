# %%
"""Exception hierarchy shared by every module of the recognizer."""


class AsrError(Exception):
    """Base class for domain errors; the CLI maps these to exit code 1."""


# ----------------------------
# 1. audio front end
# ----------------------------

class DurationTooShort(AsrError):
    def __init__(self, duration_s, window_ms=20):
        super().__init__(f"clip of {duration_s:.4f} s is shorter than one {window_ms} ms window")
        self.duration_s = duration_s


class InvalidAudio(AsrError):
    pass


class InvalidAugmentation(AsrError):
    pass


class FormatError(AsrError):
    """Bad magic, version or truncated payload in one of the binary formats."""


# ----------------------------
# 2. ctc and decoding
# ----------------------------

class ImpossibleAlignment(AsrError):
    def __init__(self, frames, needed):
        super().__init__(f"target needs at least {needed} frames but only {frames} are available")
        self.frames = frames
        self.needed = needed


class OracleTooLarge(AsrError):
    pass


class EmptyReference(AsrError):
    pass


# ----------------------------
# 3. language model
# ----------------------------

class MalformedArpa(AsrError):
    def __init__(self, section, expected=None, found=None, detail=None):
        message = f"malformed ARPA section {section}"
        if expected is not None or found is not None:
            message += f": expected {expected}, found {found}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)
        self.section = section
        self.expected = expected
        self.found = found


class OovWord(AsrError):
    def __init__(self, word):
        super().__init__(f"word {word!r} is not in the language model vocabulary")
        self.word = word


class EmptySentence(AsrError):
    pass


# ----------------------------
# 4. network, data and pipeline
# ----------------------------

class ConfigError(AsrError):
    pass


class InputTooShort(AsrError):
    def __init__(self, frames, needed):
        super().__init__(f"input has {frames} frames, the convolution stack needs {needed}")
        self.frames = frames
        self.needed = needed


class ParseError(AsrError):
    def __init__(self, line_number, detail):
        super().__init__(f"line {line_number}: {detail}")
        self.line_number = line_number


class CascadeDegenerate(AsrError):
    """No sample was routed to the second stage; `artifacts` holds stage one."""

    def __init__(self, artifacts):
        super().__init__("hard-sample subset is empty, second stage skipped")
        self.artifacts = artifacts
