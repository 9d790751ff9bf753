#include "dualstream/errors.hpp"

namespace dualstream {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::startup: return "startup";
        case ErrorCode::kernel_dead: return "kernel_dead";
        case ErrorCode::busy: return "busy";
        case ErrorCode::not_found: return "not_found";
        case ErrorCode::invalid_name: return "invalid_name";
        case ErrorCode::collision: return "collision";
        case ErrorCode::not_callable: return "not_callable";
        case ErrorCode::unsupported_version: return "unsupported_version";
        case ErrorCode::corrupt_snapshot: return "corrupt_snapshot";
        case ErrorCode::metadata_missing: return "metadata_missing";
        case ErrorCode::duplicate_descriptor: return "duplicate_descriptor";
        case ErrorCode::template_error: return "template_error";
        case ErrorCode::ordering_error: return "ordering_error";
        case ErrorCode::script_exhausted: return "script_exhausted";
        case ErrorCode::request_failed: return "request_failed";
        case ErrorCode::contract: return "contract";
        case ErrorCode::schema: return "schema";
        case ErrorCode::io: return "io";
        case ErrorCode::already_bound: return "already_bound";
    }
    return "unknown";
}

}  // namespace dualstream
