"""Implementation of the processing pipeline."""

import asyncio
from contextlib import suppress
from copy import deepcopy
from functools import partial
import logging
import sys
import traceback

from .config import Config
from .exceptions import Abort, InvalidSettings

__all__ = ('Application', 'IterableConsumer')


BASE_SETTINGS = {
    'DEBUG': False,
    'DEVICE': 'cpu',
    'NUM_WORKERS': 1,
    'OUTPUT_DIR': 'runs',
    'SEED': 0,
    'SLEEP_TIME': 0.01,
}

STAGES = (
    'error',
    'message_acknowledgement',
    'message_preprocessor',
    'result_postprocessor',
    'startup',
    'teardown',
)


class Application:
    """A pipeline that trains, evaluates, or encodes.

    The consumer yields messages: training batches, evaluation jobs, or
    encode windows, depending on the command that assembled the
    application. Each message goes through the message preprocessors
    and then the callback, whose results go through the result
    postprocessors. Preprocessors may overlap (they mostly wait on
    encoder processes); callbacks run one at a time because they step
    models.

    Args:
        name (str): Used for the logger too.
        settings (Optional[Union[Mapping, object]]): Initial settings.
            Only uppercase keys or attributes are read.
        consumer (optional): An object whose coroutine ``read`` returns
            the next message and raises
            :class:`~vidctl.exceptions.Abort` when there are no more.
            Required to run.
        callback (Optional[Callable]): A coroutine function called with
            the application and a preprocessed message, returning an
            iterable of results. Required to run.
    """

    def __init__(self, name, settings=None, *, consumer=None, callback=None):
        """Initialize the class."""
        self.name = name

        self.settings = Config()
        if isinstance(settings, dict):
            self.settings.from_mapping(settings)
        else:
            self.settings.from_object(settings or {})
        for key, value in BASE_SETTINGS.items():
            self.settings.setdefault(key, value)

        self.callback = callback
        self._callbacks = {stage: [] for stage in STAGES}

        self.extensions = {}
        self.consumer = consumer
        self.logger = logging.getLogger(self.name)

        self._queue = None
        self._step_lock = None

    def __str__(self):
        """Return the application's name."""
        return self.name

    def __repr__(self):
        """Return the application's name, bracketed."""
        return '<Application: {}>'.format(self)

    def error(self, callback):
        """Register an error handler.

        Handlers are called with the application, the original message,
        and the exception. A handler claims the exception by raising
        :class:`~vidctl.exceptions.Abort`; when no handler does, the
        exception stops the run.

        Raises:
            TypeError: If ``callback`` isn't a coroutine function.
        """
        self._register_callback(callback, 'error')
        return callback

    def message_acknowledgement(self, callback):
        """Register a coroutine called with each processed message.

        It receives the original message, whether or not processing was
        aborted.
        """
        self._register_callback(callback, 'message_acknowledgement')
        return callback

    def message_preprocessor(self, callback):
        """Register a message preprocessor.

        Preprocessors run in registration order. Each receives the
        application and the message returned by the one before it, and
        returns the message to pass on. This is where clips are augmented,
        QP maps are drawn, and the encoder is run.

        Raises:
            TypeError: If ``callback`` isn't a coroutine function.
        """
        self._register_callback(callback, 'message_preprocessor')
        return callback

    def result_postprocessor(self, callback):
        """Register a result postprocessor.

        Postprocessors run in registration order on every result the
        callback returns, for instance to append metrics records to a
        file.

        Raises:
            TypeError: If ``callback`` isn't a coroutine function.
        """
        self._register_callback(callback, 'result_postprocessor')
        return callback

    def startup(self, callback):
        """Register a coroutine that runs before the first message.

        Models, optimizers and the probed GOP are built here.
        """
        self._register_callback(callback, 'startup')
        return callback

    def teardown(self, callback):
        """Register a coroutine that runs when the run ends.

        It runs whether the run finished or failed. Checkpoints and
        reports are written here.
        """
        self._register_callback(callback, 'teardown')
        return callback

    def validate_settings(self, required=()):
        """Check the settings against every registered extension.

        All problems are collected before anything is raised so that a
        user sees the complete list at once.

        Args:
            required (Iterable[str]): Additional keys that must have a
                value for the command being run.

        Raises:
            InvalidSettings: If any key is missing, unknown, or has an
                invalid value.

        """
        problems = []
        known = set(BASE_SETTINGS)
        for extension in self.extensions.values():
            known |= extension.known_settings
            problems.extend(extension.missing_settings(self.settings))
            problems.extend(extension.validate_settings(self.settings))

        for key in required:
            if self.settings.get(key) in (None, (), [], ''):
                problems.append('{} is required by this command'.format(key))

        for key in sorted(set(self.settings) - known):
            problems.append('{} is not a known setting'.format(key))

        if problems:
            raise InvalidSettings(problems)

    async def run_blocking(self, function, *args, **kwargs):
        """Run a blocking function in the loop's default executor.

        Encoder processes and file I/O go through here so that several of
        them can run while the callback trains.

        Args:
            function (callable): The function to run.
            *args: Positional arguments for the function.
            **kwargs: Keyword arguments for the function.

        Returns:
            The function's return value.

        """
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(
            None, partial(function, *args, **kwargs))

    async def process(self, message):
        """Run a single message through the pipeline.

        The message is preprocessed, handed to the callback under the
        step lock, and its results are postprocessed. Error callbacks
        and acknowledgements run as they do for consumed messages, which
        lets an error callback retry a message in place.

        Args:
            message: The message to process.

        Raises:
            Exception: Any exception that no error callback handled.

        """
        if self._step_lock is None:
            self._step_lock = asyncio.Lock()

        original_message = _shallow_copy(message)

        try:
            message = await self._apply_callbacks(
                self._callbacks['message_preprocessor'], message)
            self.logger.debug('message.preprocessed')

            async with self._step_lock:
                results = await self.callback(self, message)
        except Abort as e:
            await self._abort(e)
        except Exception as e:
            self.logger.warning('message.failed', exc_info=True)

            handled = False
            for callback in self._callbacks['error']:
                # Any callback can prevent execution of further
                # callbacks by raising Abort.
                try:
                    await callback(self, original_message, e)
                except Abort:
                    handled = True
                    break
            if not handled:
                raise
        else:
            await self._postprocess_results(results)
        finally:
            # Don't use _apply_callbacks here since we want to pass the
            # original message into each callback.
            for callback in self._callbacks['message_acknowledgement']:
                await callback(self, original_message)
            self.logger.debug('message.acknowledged')

    def run_forever(self, num_workers=None, loop=None, debug=False):
        """Run until the consumer is exhausted, then tear down.

        Startup callbacks run first. One task then reads from the
        consumer into a queue that holds at most ``num_workers``
        messages, and ``num_workers`` tasks process them. Teardown
        callbacks run whether the run finished or failed, so a failed
        run still leaves its checkpoints and reports.

        Args:
            num_workers (Optional[int]): Processing tasks. Defaults to
                ``NUM_WORKERS``.
            loop (Optional[asyncio.AbstractEventLoop]): Runs the
                application. A new loop is created when omitted; either
                way it is closed at the end.
            debug (bool): Sets ``DEBUG``, which turns on the loop's
                debug mode and debug logging.

        Raises:
            TypeError: If there is no consumer or the callback isn't a
                coroutine function.
            Exception: The first exception no error callback claimed,
                re-raised after teardown.

        """
        if self.consumer is None:
            raise TypeError("The Application's consumer cannot be None.")

        if not asyncio.iscoroutinefunction(self.callback):
            raise TypeError("The Application's callback must be a coroutine.")

        num_workers = num_workers or self.settings['NUM_WORKERS']

        # Use the specified event loop, otherwise use a new one.
        loop = loop or asyncio.new_event_loop()
        asyncio.set_event_loop(loop)

        # Start the application.
        tasks = [
            asyncio.ensure_future(callback(self)) for callback in
            self._callbacks['startup']
        ]
        loop.run_until_complete(asyncio.gather(*tasks))

        if debug:
            self.settings['DEBUG'] = True
        if self.settings['DEBUG']:
            loop.set_debug(True)
            self.logger.setLevel(
                min(self.logger.getEffectiveLevel(), logging.DEBUG)
            )

        self.logger.debug('application.started')

        # The queue holds one message for each processing task so that
        # the consumer never runs far ahead of training.
        self._queue = asyncio.Queue(maxsize=num_workers)
        self._step_lock = asyncio.Lock()

        consumer = loop.create_task(self._consume(self._queue))

        tasks = [
            asyncio.ensure_future(self._process(consumer, self._queue))
            for _ in range(num_workers)
        ]
        future = asyncio.gather(*tasks)

        failure = None
        try:
            loop.run_until_complete(asyncio.gather(consumer, future))
        except BaseException as e:
            failure = e
            self.logger.error('application.failed', exc_info=True)
        finally:
            # Stop reading. The processors exit once the queue is empty.
            consumer.cancel()
            if failure is not None:
                for task in tasks:
                    task.cancel()
            with suppress(BaseException):
                loop.run_until_complete(future)

            tasks = [
                asyncio.ensure_future(callback(self))
                for callback
                in self._callbacks['teardown']
            ]
            loop.run_until_complete(asyncio.gather(*tasks))

            loop.close()
            self._queue = None

        self.logger.debug('application.stopped')

        if failure is not None:
            raise failure

    async def _abort(self, exc):
        """Log where an :class:`~vidctl.exceptions.Abort` came from."""
        tb = sys.exc_info()[-1]
        stack = traceback.extract_tb(tb, 1)[-1] if tb else None
        self.logger.debug('callback.aborted', extra={
            'exception': exc,
            'exception_message': exc.message,
            'aborted_by': stack,
        })

    async def _apply_callbacks(self, callbacks, value):
        """Pass ``value`` through ``callbacks`` in order."""
        for callback in callbacks:
            value = await callback(self, value)
        return value

    async def _consume(self, queue):
        """Put messages from the consumer on ``queue`` until it aborts."""
        while True:
            try:
                value = await self.consumer.read()
            except Abort as e:
                self.logger.debug('consumer.aborted', extra={
                    'reason': str(e)})
                return
            else:
                await queue.put(value)

    async def _process(self, consumer, queue):
        """Process queued messages until the consumer task is done."""
        while True:
            if queue.empty():
                if consumer.done():
                    break
                await asyncio.sleep(self.settings['SLEEP_TIME'])
                continue

            message = await queue.get()
            try:
                await self.process(message)
            finally:
                del message

    async def _postprocess_results(self, results):
        """Send each result through the result postprocessors.

        An :class:`~vidctl.exceptions.Abort` drops that result only.
        """
        if results is None:
            return

        for result in results:
            try:
                await self._apply_callbacks(
                    self._callbacks['result_postprocessor'], result)
                self.logger.debug('result.postprocessed')
            except Abort as e:
                await self._abort(e)

    def _register_callback(self, callback, stage):
        if not asyncio.iscoroutinefunction(callback):
            raise TypeError('The callback must be a coroutine.')

        self._callbacks[stage].append(callback)
        self.logger.debug('callback.registered', extra={
            'type': stage,
            'callback': callback.__qualname__,
        })


def _shallow_copy(message):
    """Return a copy of a message that doesn't duplicate tensors.

    Messages carry clips and tensors; copying the containers is enough to
    keep the original message intact when preprocessors add keys.
    """
    if isinstance(message, dict):
        return dict(message)
    with suppress(Exception):
        return deepcopy(message)
    return message


class IterableConsumer:
    """A consumer that reads messages from an iterable.

    Args:
        iterable (Iterable): The messages to produce, in order.
        reason (str): The reason given when the iterable is exhausted.
    """

    def __init__(self, iterable, reason='consumer.exhausted'):
        """Initialize the consumer."""
        self._iterator = iter(iterable)
        self._reason = reason

    async def read(self):
        """Return the next message.

        Raises:
            vidctl.exceptions.Abort: When there are no more messages.
        """
        try:
            return next(self._iterator)
        except StopIteration:
            raise Abort(self._reason) from None
