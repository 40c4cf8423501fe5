class ImproperlyConfigured(Exception):
    pass


class KineticError(Exception):
    default_message = 'Unknown Error.'

    def __init__(self, message=None, *args, **context):
        self.message = message or self.default_message
        self.context = context
        super().__init__(self.message, *args)


class ArgumentError(KineticError):
    default_message = 'Invalid argument.'


class ParameterOutOfBox(KineticError):
    default_message = 'Parameter lies outside the parameter box.'


class ModelError(KineticError):
    default_message = 'Diffusion coefficient fell below its lower bound.'


class NumericError(KineticError):
    default_message = 'Non-finite numeric result.'


class SimulationDiverged(NumericError):
    default_message = 'Simulation diverged.'

    def __init__(self, message=None, particle=None, step=None, *args, **context):
        self.particle = particle
        self.step = step
        super().__init__(message, *args, particle=particle, step=step, **context)


class OptimizationError(NumericError):
    default_message = 'Every optimizer start failed.'

    def __init__(self, message=None, trace=None, *args, **context):
        self.trace = trace or []
        super().__init__(message, *args, **context)


class RankError(NumericError):
    default_message = 'Singular normal matrix.'


class InsufficientData(KineticError):
    default_message = 'Not enough rows to summarize.'
