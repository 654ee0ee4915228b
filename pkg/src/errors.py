# ============================================================
#  FLEXMESH ERRORS (COLORED, NO TRACEBACK)
# ============================================================


class FlexMeshError(Exception):
    """Base error for the engine; printed without a traceback by the CLI."""
    RED = "\033[91m"
    YELLOW = "\033[93m"
    CYAN = "\033[96m"
    BOLD = "\033[1m"
    RESET = "\033[0m"

    label = "Error"
    exit_code = 1

    def __init__(self, message, where=None, hint=None):
        super().__init__(message)
        self.message = message
        self.where = where
        self.hint = hint

    def __str__(self):
        return self.message if self.where is None else f"{self.message} ({self.where})"

    def render(self, color=True):
        if not color:
            text = f"{self.label}: {self}"
            return text if not self.hint else f"{text}\n  {self.hint}"
        error = f"{self.RED}{self.BOLD}{self.label}:{self.RESET} {self.message}"
        if self.where is not None:
            error += f" {self.CYAN}({self.where}){self.RESET}"
        if self.hint:
            error += f"\n  {self.YELLOW}{self.hint}{self.RESET}"
        return error


class InputError(FlexMeshError):
    """Bad files, malformed data or configuration (exit code 2)."""
    label = "Input Error"
    exit_code = 2


class NumericError(FlexMeshError):
    """Divergence, non-finite state or a failed verification (exit code 1)."""
    label = "Numeric Error"
    exit_code = 1
