"""Exception hierarchy shared across the package.

Two families matter for the command-line surface: validation problems
(bad inputs, bad config) exit with status 1, runtime failures (I/O,
training aborts) exit with status 2.
"""


class ValidationError(ValueError):
    """Input or configuration rejected before any work was done."""


class RuntimeFailure(RuntimeError):
    """Operation started but could not complete."""


class SchemaError(ValidationError):
    """A file does not match its declared schema."""


class MissingTileError(RuntimeFailure):
    """Offline tile lookup missed the cache."""

    def __init__(self, zoom: int, x: int, y: int):
        super().__init__(f"tile {zoom}/{x}/{y} not in cache and downloads are disabled")
        self.zoom = zoom
        self.x = x
        self.y = y
