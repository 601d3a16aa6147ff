# Core module: settings, errors and random streams
