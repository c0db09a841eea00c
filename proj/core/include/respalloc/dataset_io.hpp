#pragma once

#include <string>

#include "respalloc/datagen.hpp"

namespace resp {

inline constexpr int kDatasetSchemaVersion = 1;

// JSONL archive: one metadata record, then one record per datum.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

void save_gamma_sidecar(const std::string& path, const GammaSidecar& sc);
GammaSidecar load_gamma_sidecar(const std::string& path);

// Track CSV: header row (track_id,frame_id,timestamp_ms,agent_type,x,y,vx,vy,
// psi_rad,length,width), comma-separated. Velocities are reconstructed by
// finite differences when the vx/vy columns are missing.
void write_tracks_csv(const std::string& path, const TrackTable& table);
TrackTable load_tracks_csv(const std::string& path);

}  // namespace resp
