#pragma once

#include <stdexcept>
#include <string>

namespace icufeat {

// Base for everything thrown by this library.
class PipelineError : public std::runtime_error {
public:
    explicit PipelineError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tabular input does not match the expected schema (missing column, bad row).
class SchemaError : public PipelineError { public: using PipelineError::PipelineError; };

// Cohort selection produced an unusable class split.
class CohortError : public PipelineError { public: using PipelineError::PipelineError; };

// An argument is outside its documented domain.
class ParamError : public PipelineError { public: using PipelineError::PipelineError; };

// Invalid or inconsistent configuration.
class ConfigError : public PipelineError { public: using PipelineError::PipelineError; };

// Malformed or inconsistent data (shape mismatch, missing feature, ...).
class DataError : public PipelineError { public: using PipelineError::PipelineError; };

// Mask became empty during cleanup; callers may drop the offending image.
class EmptyMaskError : public PipelineError { public: using PipelineError::PipelineError; };

// An adapter was asked for an operation it does not support.
class CapabilityError : public PipelineError { public: using PipelineError::PipelineError; };

// Tree fitting cannot proceed (single-class input, too few samples).
class DegenerateTreeError : public PipelineError { public: using PipelineError::PipelineError; };

} // namespace icufeat
