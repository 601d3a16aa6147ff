# File exports: raster planes, depth previews, JSON/CSV results
