#pragma once

namespace bridgekit::mc {

extern const int kEdgeTable[256];
extern const int kTriTable[256][16];

}  // namespace bridgekit::mc
