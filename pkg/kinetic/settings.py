import configparser


def _floats(value):
    return [float(v) for v in value.replace(',', ' ').split()]


def _ints(value):
    return [int(v) for v in value.replace(',', ' ').split()]


def _words(value):
    return value.replace(',', ' ').split()


def _optional_int(value):
    return None if value.strip().lower() in ('', 'none') else int(value)


def _optional_floats(value):
    return None if value.strip().lower() in ('', 'none') else _floats(value)


def _boolean(value):
    return configparser.ConfigParser.BOOLEAN_STATES[value.strip().lower()]


DEFAULT_SETTINGS = {
    # [model]
    'MODEL': 'MeanFieldLangevin',
    'THETA0': None,
    'HALF_WIDTH': 5.0,
    # [grid]
    'N_PARTICLES': [125, 250, 500, 1000],
    'OBS_STEPS': [200],
    'FINE_FACTOR': [20],
    'HORIZON': 1.0,
    # [run]
    'REPLICATIONS': 100,
    'MODES': ['C', 'P'],
    'SEED': 0,
    'OUTPUT_DIR': 'results',
    'THREADS': 1,
    'TIMING': False,
    'BATCH_SIZE': 16,
    'REF_PARTICLES': None,
    'MIN_CLT_ROWS': 100,
    'HISTOGRAM_BINS': 30,
    # [oracle]
    'ORACLE_PARTICLES': 5000,
    'ORACLE_FINE_FACTOR': 40,
    'ORACLE_OBS_STEPS': 100,
    'ORACLE_SEEDS': 5,
    # [optimizer]
    'N_STARTS': 5,
    'GTOL': 1e-8,
    'MAX_EVALS': 2000,
    # [hypo]
    'HYPO_PARTICLES': 3,
    'HYPO_PROBES': 10,
    'HYPO_RTOL': 1e-8,
    'HYPO_FD_STEP': 1e-5,
    # [scaling]
    'SURROGATE_OBS_STEPS': [50, 100, 200, 400],
    'SURROGATE_PARTICLES': 200,
    'POC_PARTICLES': [10, 50, 250],
    'POC_SEEDS': 20,
    'POC_OBS_STEPS': 20,
    'POC_FINE_FACTOR': 10,
}


# key -> (section, option, parser)
INI_SCHEMA = {
    'MODEL': ('model', 'name', str),
    'THETA0': ('model', 'theta0', _optional_floats),
    'HALF_WIDTH': ('model', 'half_width', float),
    'N_PARTICLES': ('grid', 'n_particles', _ints),
    'OBS_STEPS': ('grid', 'obs_steps', _ints),
    'FINE_FACTOR': ('grid', 'fine_factor', _ints),
    'HORIZON': ('grid', 'horizon', float),
    'REPLICATIONS': ('run', 'replications', int),
    'MODES': ('run', 'modes', _words),
    'SEED': ('run', 'seed', int),
    'OUTPUT_DIR': ('run', 'output_dir', str),
    'THREADS': ('run', 'threads', int),
    'TIMING': ('run', 'timing', _boolean),
    'BATCH_SIZE': ('run', 'batch_size', int),
    'REF_PARTICLES': ('run', 'ref_particles', _optional_int),
    'MIN_CLT_ROWS': ('run', 'min_clt_rows', int),
    'HISTOGRAM_BINS': ('run', 'histogram_bins', int),
    'ORACLE_PARTICLES': ('oracle', 'n_particles', int),
    'ORACLE_FINE_FACTOR': ('oracle', 'fine_factor', int),
    'ORACLE_OBS_STEPS': ('oracle', 'obs_steps', int),
    'ORACLE_SEEDS': ('oracle', 'seeds', int),
    'N_STARTS': ('optimizer', 'n_starts', int),
    'GTOL': ('optimizer', 'gtol', float),
    'MAX_EVALS': ('optimizer', 'max_evals', int),
    'HYPO_PARTICLES': ('hypo', 'n_particles', int),
    'HYPO_PROBES': ('hypo', 'probes', int),
    'HYPO_RTOL': ('hypo', 'rtol', float),
    'HYPO_FD_STEP': ('hypo', 'fd_step', float),
    'SURROGATE_OBS_STEPS': ('scaling', 'surrogate_obs_steps', _ints),
    'SURROGATE_PARTICLES': ('scaling', 'surrogate_particles', int),
    'POC_PARTICLES': ('scaling', 'poc_particles', _ints),
    'POC_SEEDS': ('scaling', 'poc_seeds', int),
    'POC_OBS_STEPS': ('scaling', 'poc_obs_steps', int),
    'POC_FINE_FACTOR': ('scaling', 'poc_fine_factor', int),
}


class ExperimentSettings:
    """
    Settings resolved from an INI file, falling back to DEFAULT_SETTINGS.

    :param path [str]: INI file, optional.
    :param overrides [Dict[str, Any]]: values taking precedence over the file.
    """

    def __init__(self, path=None, overrides=None):
        self.path = path
        self.parser = configparser.ConfigParser()
        self.source = ''
        if path is not None:
            with open(path) as fp:
                self.source = fp.read()
            self.parser.read_string(self.source, source=str(path))
        self.overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    def __getattr__(self, key):
        if key not in DEFAULT_SETTINGS:
            raise AttributeError(key)
        if key in self.overrides:
            return self.overrides[key]
        section, option, parse = INI_SCHEMA[key]
        if self.parser.has_option(section, option):
            return parse(self.parser.get(section, option))
        return DEFAULT_SETTINGS[key]

    def unknown_options(self):
        known = {(section, option) for section, option, _ in INI_SCHEMA.values()}
        return sorted(
            f'[{section}] {option}'
            for section in self.parser.sections()
            for option in self.parser.options(section)
            if (section, option) not in known
        )

    def as_ini(self):
        """The resolved settings as INI text."""
        writer = configparser.ConfigParser()
        for key, (section, option, _) in INI_SCHEMA.items():
            value = getattr(self, key)
            if not writer.has_section(section):
                writer.add_section(section)
            if isinstance(value, (list, tuple)):
                value = ', '.join(str(v) for v in value)
            writer.set(section, option, 'none' if value is None else str(value))
        lines = []
        for section in writer.sections():
            lines.append(f'[{section}]')
            lines.extend(f'{option} = {value}' for option, value in writer.items(section))
            lines.append('')
        return '\n'.join(lines)
