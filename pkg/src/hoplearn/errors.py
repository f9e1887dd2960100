"""Exception types shared across the pipeline.

Every error raised on purpose by hoplearn derives from :class:`HoplearnError`,
and each family carries an ``exit_code`` that the CLI returns verbatim.
"""


class HoplearnError(Exception):
    exit_code = 1


# -- input tables -----------------------------------------------------------

class InputError(HoplearnError):
    exit_code = 3


class SchemaError(InputError):
    pass


class ParseError(InputError):
    def __init__(self, line, message="unparsable field"):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DuplicateNode(InputError):
    def __init__(self, node_id):
        self.node_id = node_id
        super().__init__(f"duplicate node id {node_id}")


class DanglingEdge(InputError):
    def __init__(self, src, dst):
        self.src, self.dst = src, dst
        super().__init__(f"edge {src}->{dst} references a node missing from the node table")


class InvalidWeight(InputError):
    pass


class EmptySpec(InputError):
    pass


class UnknownTarget(InputError):
    def __init__(self, node_id):
        self.node_id = node_id
        super().__init__(f"target {node_id} is not a node of the graph")


# -- dataflow engine --------------------------------------------------------

class EngineError(HoplearnError):
    exit_code = 4


class MapError(EngineError):
    def __init__(self, index, cause=None):
        self.index = index
        super().__init__(f"mapper failed on record {index}: {cause!r}")


class ReduceError(EngineError):
    def __init__(self, key, cause=None):
        self.key = key
        super().__init__(f"reducer failed on key {tuple(key)}: {cause!r}")


class CorruptCheckpoint(EngineError):
    pass


class MalformedGroup(EngineError):
    pass


# -- models -----------------------------------------------------------------

class ModelError(HoplearnError):
    exit_code = 5


class ShapeError(ModelError):
    pass


class CacheError(ModelError):
    pass


class CheckpointError(ModelError):
    pass


class NumericsError(HoplearnError):
    exit_code = 6


# -- training / evaluation --------------------------------------------------

class ShardError(HoplearnError):
    exit_code = 7


class UndefinedMetric(HoplearnError):
    exit_code = 7
