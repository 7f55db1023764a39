"""Exception hierarchy. Every domain failure derives from AffordkitError so the
CLI can map it to exit code 1."""


class AffordkitError(Exception):
    pass


# geom
class NonPositiveDepth(AffordkitError):
    pass


class InvalidDepth(AffordkitError):
    pass


class LogNearPi(AffordkitError):
    pass


# ingest
class ManifestParse(AffordkitError):
    pass


class MissingFile(AffordkitError):
    pass


class DimensionMismatch(AffordkitError):
    pass


class BadLandmarkObservation(AffordkitError):
    pass


class DegenerateConfig(AffordkitError):
    pass


# metric
class NoValidObservations(AffordkitError):
    pass


class NonPositiveScale(AffordkitError):
    pass


class DivergedOptimization(AffordkitError):
    pass


class EmptyOverlap(AffordkitError):
    pass


# afford
class EmptyHandMask(AffordkitError):
    def __init__(self, frame):
        super().__init__(f"hand mask of frame {frame} is empty")
        self.frame = frame


class NoValidHandDepth(AffordkitError):
    def __init__(self, frame):
        super().__init__(f"hand mask of frame {frame} has no valid depth")
        self.frame = frame


class NoVisiblePoints(AffordkitError):
    pass


class NothingAboveThreshold(AffordkitError):
    pass


class LowQualityLabel(AffordkitError):
    pass


# tsdf
class DegenerateNormal(AffordkitError):
    pass


# costs
class EmptyGoals(AffordkitError):
    pass


class EmptyAgentPoints(AffordkitError):
    pass


class DegenerateSegment(AffordkitError):
    pass


# diffusion / denoiser
class BadScheduleParams(AffordkitError):
    pass


class BadStepIndex(AffordkitError):
    pass


class HorizonMismatch(AffordkitError):
    pass


class EmptyBatch(AffordkitError):
    pass


class NumericalUnderflow(AffordkitError):
    pass


class EmptyDataset(AffordkitError):
    pass


class DivergedTraining(AffordkitError):
    pass


# cli
class UnknownTarget(AffordkitError):
    pass


class IoError(AffordkitError):
    pass
