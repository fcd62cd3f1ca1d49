"""Extension base."""

__all__ = ('Extension',)


class Extension:
    """A base class for vidctl extensions.

    Every component of the toolkit (clip store, codec bridge, models,
    training, evaluation) is an extension. Extensions contribute their
    settings to the application they are attached to and look them up
    through ``self.app.settings``.

    Args:
        app (Optional[vidctl.base.Application]): Attached right away when
            given; otherwise call :meth:`init_app` before using
            :attr:`app`.
    """

    def __init__(self, app=None):
        """Initialize the class."""
        self._app = None
        if app:
            self.init_app(app)

    @property
    def DEFAULT_SETTINGS(self):  # NOQA: N802
        """Defaults the application's settings are filled in with.

        Values the application already has are kept. Empty by default.
        """  # NOQA: D401
        return {}

    @property
    def REQUIRED_SETTINGS(self):  # NOQA: N802
        """Keys that must have a value before a run starts.

        They are reported by :meth:`missing_settings` when unset or
        ``None``. Empty by default.
        """  # NOQA: D401
        return ()

    @property
    def known_settings(self):
        """Return every settings key the extension understands."""
        return set(self.DEFAULT_SETTINGS) | set(self.REQUIRED_SETTINGS)

    def init_app(self, app):
        """Attach the extension to an application.

        Defaults go into ``app.settings`` without replacing values that
        are already there, and the extension is registered in
        ``app.extensions`` under its lowercase class name.
        """
        for key, value in self.DEFAULT_SETTINGS.items():
            app.settings.setdefault(key, value)

        self._app = app
        app.extensions[type(self).__name__.lower()] = self

    def missing_settings(self, settings):
        """Return one problem per required key without a value."""
        return [
            '{} requires the missing setting {}'.format(
                type(self).__name__, key)
            for key in self.REQUIRED_SETTINGS
            if settings.get(key) is None
        ]

    def validate_settings(self, settings):
        """Return problems with the values of the extension's settings.

        Extensions override this to check ranges and types. The base
        implementation finds nothing wrong.

        Args:
            settings (Mapping): The settings to check.

        Returns:
            List[str]: One problem description per invalid value.
        """
        return []

    @property
    def app(self):
        """The application the extension is attached to."""
        if self._app is None:
            raise RuntimeError(
                '{} is not attached to an application; call init_app '
                'first.'.format(type(self).__name__))
        return self._app
