#include "vrwkv/memory.hpp"

namespace vrwkv::memory {

namespace {
thread_local ElementArena* current = nullptr;
}

ElementArena* active_arena() { return current; }

ElementArena& require_arena() {
  if (current == nullptr) {
    throw InstrumentationError("no element arena is active on this thread");
  }
  return *current;
}

ArenaScope::ArenaScope(ElementArena& arena) : previous_(current) { current = &arena; }

ArenaScope::~ArenaScope() { current = previous_; }

}  // namespace vrwkv::memory
