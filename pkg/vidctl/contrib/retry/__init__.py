"""Retry plugin for vidctl.

Retry adds the ability to automatically reprocess messages that fail
because an encoder process failed. Encoder crashes and timeouts are
usually transient (an overloaded host, a killed process), so a batch or
evaluation job is run through the pipeline again before the failure is
passed on to the next error callback.
"""

import asyncio
import time

from vidctl.exceptions import Abort, BridgeError, ParseError
from vidctl.extensions import Extension

__all__ = ('Retry',)


def _calculate_delay(delay, backoff, number_of_retries):
    """Return the seconds to sleep before the next attempt.

    The delay grows geometrically: ``delay * backoff ** attempts``.
    """
    return delay * backoff ** number_of_retries


def _exceeded_threshold(number_of_retries, maximum_retries):
    """Whether ``maximum_retries`` attempts were already made.

    ``None`` never runs out.
    """
    if maximum_retries is None:
        return False
    return number_of_retries >= maximum_retries


def _exceeded_timeout(start_time, duration):
    """Whether ``duration`` seconds have passed since ``start_time``.

    ``None`` never runs out.
    """
    if duration is None:
        return False
    return (start_time + duration) <= int(time.time())


async def _reprocess(app, message):
    """Run the message through the application's pipeline again."""
    await app.process(message)


async def _retry(app, message, exc):
    """Run a job again after an encoder failure.

    Exceptions outside ``RETRY_EXCEPTIONS`` are left to the next error
    callback, as are failures whose attempts or time have run out. The
    attempt count and first failure time travel with the message under
    ``_retry``.

    Args:
        app (vidctl.base.Application): The running application.
        message (dict): The original message of the failed job.
        exc (Exception): Why the job failed.

    Raises:
        Abort: Once the job has been run again, whatever the outcome.

    """
    if not isinstance(exc, app.settings['RETRY_EXCEPTIONS']):
        return

    settings = _get_settings(app, exc)
    retry_info = _retry_info(message)

    if _exceeded_threshold(retry_info['count'], settings['RETRY_THRESHOLD']):
        app.logger.warning('message.retries_exhausted', extra={
            'count': retry_info['count'],
            'exception': exc,
        })
        return
    if _exceeded_timeout(retry_info['start_time'], settings['RETRY_TIMEOUT']):
        app.logger.warning('message.retry_timeout', extra={
            'count': retry_info['count'],
            'exception': exc,
        })
        return

    if settings['RETRY_DELAY']:
        retry_info['delay'] = _calculate_delay(
            settings['RETRY_DELAY'], settings['RETRY_BACKOFF'],
            retry_info['count'])
        await asyncio.sleep(retry_info['delay'])

    retry_info['count'] += 1
    message['_retry'] = retry_info
    app.logger.info('message.retrying', extra={
        'count': retry_info['count'],
        'exception': exc,
    })
    await settings['RETRY_CALLBACK'](app, message)

    # Later error callbacks must not see a failure that was retried.
    raise Abort('message.retried', message)


def _retry_info(message):
    """Return the message's attempt count and first failure time."""
    info = message.get('_retry', {})
    info.setdefault('count', 0)
    info.setdefault('start_time', int(time.time()))
    return info


def _get_settings(app, exc):
    """Return the override settings for the exception, if any."""
    for exc_key, settings in app.settings['RETRY_OVERRIDES'].items():
        if isinstance(exc, exc_key):
            return settings
    return app.settings


def _check(settings, prefix=''):
    """Return problems with a set of retry settings."""
    problems = []
    if settings['RETRY_DELAY'] < 0:
        problems.append('{}RETRY_DELAY cannot be negative'.format(prefix))
    if settings['RETRY_BACKOFF'] < 0:
        problems.append('{}RETRY_BACKOFF cannot be negative'.format(prefix))
    threshold = settings['RETRY_THRESHOLD']
    if threshold is not None and threshold < 0:
        problems.append(
            '{}RETRY_THRESHOLD cannot be negative'.format(prefix))
    if not asyncio.iscoroutinefunction(settings['RETRY_CALLBACK']):
        problems.append(
            '{}RETRY_CALLBACK is not a coroutine'.format(prefix))
    return problems


class Retry(Extension):
    """A class that adds encoder retries to an application."""

    DEFAULT_SETTINGS = {
        'RETRY_BACKOFF': 2,
        'RETRY_CALLBACK': _reprocess,
        'RETRY_DELAY': 0.5,
        'RETRY_EXCEPTIONS': BridgeError,
        'RETRY_THRESHOLD': 2,
        'RETRY_TIMEOUT': None,
        # A stream that can't be parsed won't parse on the next attempt.
        'RETRY_OVERRIDES': {ParseError: {'RETRY_THRESHOLD': 0}},
    }

    _OVERRIDABLE = (
        'RETRY_BACKOFF',
        'RETRY_CALLBACK',
        'RETRY_DELAY',
        'RETRY_THRESHOLD',
        'RETRY_TIMEOUT',
    )

    def init_app(self, app):
        """Attach to the app and put the retry handler first."""
        super().init_app(app)
        self._merge_override_settings(app)
        app._callbacks['error'].insert(0, _retry)

    def validate_settings(self, settings):
        """Return problems with the retry settings and their overrides."""
        problems = _check(settings)
        for exc, override in settings['RETRY_OVERRIDES'].items():
            prefix = '{}: '.format(exc.__name__)
            problems.extend(_check({**settings, **override}, prefix))
        return problems

    def _merge_override_settings(self, app):
        """Merge base settings into each override."""
        defaults = {key: app.settings[key] for key in self._OVERRIDABLE}
        overrides = {}
        for exc, override in app.settings['RETRY_OVERRIDES'].items():
            if issubclass(exc, app.settings['RETRY_EXCEPTIONS']):
                overrides[exc] = {**defaults, **override}
        app.settings['RETRY_OVERRIDES'] = overrides
