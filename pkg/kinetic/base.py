import logging
import time

from kinetic import constants
from kinetic.exceptions import (
    ImproperlyConfigured,
    KineticError,
    ArgumentError,
    ParameterOutOfBox,
    ModelError,
    NumericError,
    InsufficientData,
)


logger = logging.getLogger('kinetic.runner')


class TaskDispatcher:

    error_mapping = {
        ImproperlyConfigured: constants.EXIT_CODE.CONFIG_ERROR,
        ArgumentError: constants.EXIT_CODE.CONFIG_ERROR,
        ParameterOutOfBox: constants.EXIT_CODE.CONFIG_ERROR,
        ModelError: constants.EXIT_CODE.NUMERIC_FAILURE,
        NumericError: constants.EXIT_CODE.NUMERIC_FAILURE,
        InsufficientData: constants.EXIT_CODE.NUMERIC_FAILURE,
    }

    def _dispatcher(self, command, task, target=None, **params):
        """
        :param command [str]: subcommand name, used in logs and hook contexts.

        :param task [Callable]: the work to run, called as task(**params).

        :param target [str]: what the task works on (model, output path, ...).

        :param params [Dict[str, Any]]: keyword arguments of the task.
        """
        context = {
            'command': command,
            'target': target,
            'params': params,
        }

        start = time.perf_counter()
        result = task(**params)
        context['elapsed'] = time.perf_counter() - start

        self._after_task(context, result)

        logger.info(
            "%s %s %.3fs",
            command,
            target,
            context['elapsed'],
            extra=dict(context=context),
        )
        return result

    def _after_task(self, context, result):
        """
        Hook called after the task ran

        :param context [Dict[str, Any]]: the context of the task, with its elapsed time.
        :param result: what the task returned.
        """
        if hasattr(self, '_after_task_subscribers'):
            for fn in self._after_task_subscribers:
                fn(context, result)

    def after_task_hook(self, func):
        """
        Add a callable to be called after a task ran.

        callable signature: (context, result) where context is a dict
        containing the task data:
            - command,
            - target,
            - params,
            - elapsed.

        :param func [Callable]: callable to be called after the task
        """
        assert callable(func), "'func' must be a callable"

        if not hasattr(self, '_after_task_subscribers'):
            self._after_task_subscribers = [func]
        else:
            self._after_task_subscribers.append(func)

    @classmethod
    def exit_code(cls, exc):
        """Exit code for `exc`, looked up along its class hierarchy."""
        for klass in type(exc).__mro__:
            if klass in cls.error_mapping:
                return cls.error_mapping[klass]
        if isinstance(exc, KineticError):
            return constants.EXIT_CODE.NUMERIC_FAILURE
        return constants.EXIT_CODE.UNEXPECTED
