"""Exception hierarchy. Each class carries the process exit code the CLI uses."""


class FloodsegError(Exception):
    exit_code = 1


class ShapeError(FloodsegError, ValueError):
    exit_code = 3


class FormatError(FloodsegError, ValueError):
    exit_code = 4


class ConfigError(FloodsegError, ValueError):
    exit_code = 5


class DataError(FloodsegError, ValueError):
    exit_code = 6


class RoutingError(FloodsegError, KeyError):
    exit_code = 7

    def __str__(self):
        # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""
