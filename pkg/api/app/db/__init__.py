# Persistence: IDX datasets, checkpoints, images and result tables
